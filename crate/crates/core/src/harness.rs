//! Command implementations behind the `genreg` binary: dataset generation,
//! training, registration, evaluation reports and the consensus benchmark.
//!
//! Every command derives all randomness from one seed. Reports keep timings
//! in dedicated `wall_ms` fields so two runs with the same seed differ only
//! there.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::with_f32_rounding;
use crate::config::Config;
use crate::datagen::{
    generate_dataset, load_pair, manifest_path, read_cloud, read_manifest, sub_seed, write_cloud, PairRecord,
};
use crate::error::{Error, Result};
use crate::estimation::{icp, pdsac, ransac, CorrespondenceSet, PdsacConfig, RansacConfig, ICP_MAX_ITER, ICP_TOL};
use crate::geometry::{apply, random_transform, rotation_error, translation_error, PointCloud, RigidTransform};
use crate::metrics::chamfer;
use crate::networks::{generator_forward, NetworkConfig, ParamStore, Precision};
use crate::pipeline::{estimate_from_generated, Consensus};
use crate::training::{load_trained, train, TrainOutcome, TrainPair, TrainSetup};

pub const REPORT_HEADER: &str = "pair_id,method,cd,re_deg,te,wall_ms,residual";
pub const BENCH_HEADER: &str = "trial,method,re_deg,te,wall_ms,residual";
pub const WORKERS_ENV: &str = "GENREG_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Genreg,
    Icp,
    RansacOnGenreg,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Genreg, Method::Icp, Method::RansacOnGenreg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Genreg => "genreg",
            Method::Icp => "icp",
            Method::RansacOnGenreg => "ransac-on-genreg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}` (expected genreg, icp or ransac-on-genreg)")))
    }

    /// Comma-separated list, duplicates removed, order kept.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = Method::parse(part)?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("no methods given"));
        }
        Ok(out)
    }

    fn needs_generator(self) -> bool {
        self != Method::Icp
    }
}

/// `GENREG_WORKERS` wins over the flag.
pub fn resolve_workers(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match std::env::var(WORKERS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            Some(v.trim().parse().map_err(|_| Error::invalid(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?)
        }
        _ => flag,
    };
    if n == Some(0) {
        return Err(Error::invalid("worker count must be positive"));
    }
    Ok(n)
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn hardware_note() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} with {cores} logical cores", std::env::consts::ARCH, std::env::consts::OS)
}

pub fn gen_data(cfg: &Config, out_dir: &Path, seed: u64) -> Result<Vec<PairRecord>> {
    generate_dataset(&cfg.data, out_dir, seed)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(PairRecord, TrainPair)>> {
    let path = manifest_path(dir);
    if !path.is_file() {
        return Err(Error::invalid(format!("no dataset manifest at {}", path.display())));
    }
    let records = read_manifest(&path)?;
    records
        .into_iter()
        .map(|rec| {
            let (a, b, t_gt) = load_pair(dir, &rec)?;
            let pair = TrainPair { id: rec.pair_id.clone(), a, b, t_gt };
            Ok((rec, pair))
        })
        .collect()
}

pub fn train_cmd(cfg: &Config, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let pairs: Vec<TrainPair> = load_dataset(data_dir)?.into_iter().map(|(_, p)| p).collect();
    let setup = TrainSetup {
        network: cfg.network.clone(),
        train: cfg.train.clone(),
        pdsac: cfg.pdsac,
        out_dir: Some(out_dir.to_path_buf()),
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    train(&setup, &pairs)
}

/// Generator and its configuration, checked against `expected` when given.
pub struct Model {
    pub network: NetworkConfig,
    pub generator: ParamStore,
}

impl Model {
    pub fn load(checkpoint: &Path, expected: Option<&NetworkConfig>) -> Result<Self> {
        let (network, generator, _) = load_trained(checkpoint, expected)?;
        Ok(Self { network, generator })
    }

    fn check_points(&self, pc: &PointCloud, what: &str) -> Result<()> {
        if pc.len() != self.network.n_points {
            return Err(Error::Config {
                key: "network.n_points".into(),
                message: format!("{what} has {} points, the model expects {}", pc.len(), self.network.n_points),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterOutput {
    pub t_est: [f64; 16],
    /// Chamfer distance between `T_est(A)` and `B`.
    pub cd: f64,
    /// Chamfer distance between `A_g` and `B`.
    pub cd_generated: f64,
    pub residual_a: f64,
    pub residual_b: f64,
    pub wall_ms: f64,
}

/// Registers one pair and writes `a_g`, `b_g`, `aligned_a` clouds,
/// `t_est.txt` (16 row-major numbers) and `metrics.json` into `out_dir`.
pub fn register_cmd(
    model: &Model,
    a_path: &Path,
    b_path: &Path,
    out_dir: &Path,
    pdsac_cfg: &PdsacConfig,
    precision: Precision,
    seed: u64,
) -> Result<RegisterOutput> {
    let a = read_cloud(a_path)?;
    let b = read_cloud(b_path)?;
    model.check_points(&a, "cloud A")?;
    model.check_points(&b, "cloud B")?;
    let start = Instant::now();
    let (gen, (ra, rb, t_est)) = with_f32_rounding(precision == Precision::F32, || -> Result<_> {
        let g = generator_forward(&a, &b, &model.generator, &model.network)?;
        let est = estimate_from_generated(&a, &b, &g.a_g, &g.b_g, Consensus::Pdsac(pdsac_cfg), seed)?;
        Ok((g, est))
    })?;
    let wall_ms = ms(start);
    fs::create_dir_all(out_dir)?;
    let aligned = apply(&a, &t_est);
    write_cloud(&out_dir.join("a_g.ply"), &gen.a_g)?;
    write_cloud(&out_dir.join("b_g.ply"), &gen.b_g)?;
    write_cloud(&out_dir.join("aligned_a.ply"), &aligned)?;
    let t = t_est.to_row_major();
    let line: Vec<String> = t.iter().map(f64::to_string).collect();
    fs::write(out_dir.join("t_est.txt"), line.join(" ") + "\n")?;
    let out = RegisterOutput {
        t_est: t,
        cd: chamfer(&aligned, &b)?,
        cd_generated: chamfer(&gen.a_g, &b)?,
        residual_a: ra.residual,
        residual_b: rb.residual,
        wall_ms,
    };
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub pair_id: String,
    pub method: Method,
    /// Chamfer distance between the aligned source and the target.
    pub cd: f64,
    pub re_deg: f64,
    pub te: f64,
    pub wall_ms: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub mean_cd: f64,
    pub mean_re_deg: f64,
    pub mean_te: f64,
    pub mean_wall_ms: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub hardware: String,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

impl RegistrationReport {
    pub fn new(rows: Vec<ReportRow>, methods: &[Method]) -> Self {
        let aggregates = methods
            .iter()
            .filter_map(|&m| {
                let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.method == m).collect();
                if sel.is_empty() {
                    return None;
                }
                let mean = |f: fn(&ReportRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64;
                Some(Aggregate {
                    method: m,
                    mean_cd: mean(|r| r.cd),
                    mean_re_deg: mean(|r| r.re_deg),
                    mean_te: mean(|r| r.te),
                    mean_wall_ms: mean(|r| r.wall_ms),
                    pairs: sel.len(),
                })
            })
            .collect();
        Self { hardware: hardware_note(), rows, aggregates }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.3},{}",
                r.pair_id,
                r.method.name(),
                r.cd,
                r.re_deg,
                r.te,
                r.wall_ms,
                r.residual
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub methods: Vec<Method>,
    pub pdsac: PdsacConfig,
    pub ransac: RansacConfig,
    pub precision: Precision,
    pub workers: Option<usize>,
    pub seed: u64,
    /// Aligned source clouds are written here as `<pair>_<method>.ply`.
    pub cloud_dir: Option<PathBuf>,
}

struct Estimate {
    method: Method,
    t: RigidTransform,
    wall_ms: f64,
    residual: f64,
}

fn evaluate_pair(model: Option<&Model>, pair: &TrainPair, index: usize, opts: &EvalOptions) -> Result<Vec<ReportRow>> {
    let seed = sub_seed(opts.seed, index as u64);
    let mut estimates = Vec::new();
    let generated = if opts.methods.iter().any(|m| m.needs_generator()) {
        let model = model.ok_or_else(|| Error::invalid("genreg methods need a checkpoint"))?;
        model.check_points(&pair.a, &format!("{} cloud A", pair.id))?;
        model.check_points(&pair.b, &format!("{} cloud B", pair.id))?;
        let start = Instant::now();
        let g = with_f32_rounding(opts.precision == Precision::F32, || {
            generator_forward(&pair.a, &pair.b, &model.generator, &model.network)
        })?;
        Some((g, ms(start)))
    } else {
        None
    };
    for &m in &opts.methods {
        let est = match m {
            Method::Icp => {
                let start = Instant::now();
                let r = icp(&pair.a, &pair.b, ICP_MAX_ITER, ICP_TOL)?;
                Estimate { method: m, t: r.transform, wall_ms: ms(start), residual: r.final_rmse }
            }
            Method::Genreg | Method::RansacOnGenreg => {
                let (g, forward_ms) = generated.as_ref().expect("generated above");
                let consensus =
                    if m == Method::Genreg { Consensus::Pdsac(&opts.pdsac) } else { Consensus::Ransac(&opts.ransac) };
                let start = Instant::now();
                let (ra, rb, t) = estimate_from_generated(&pair.a, &pair.b, &g.a_g, &g.b_g, consensus, seed)?;
                let wall = forward_ms + ms(start);
                Estimate { method: m, t, wall_ms: wall, residual: 0.5 * (ra.residual + rb.residual) }
            }
        };
        estimates.push(est);
    }
    estimates
        .into_iter()
        .map(|e| {
            let aligned = apply(&pair.a, &e.t);
            if let Some(dir) = &opts.cloud_dir {
                write_cloud(&dir.join(format!("{}_{}.ply", pair.id, e.method.name())), &aligned)?;
            }
            Ok(ReportRow {
                pair_id: pair.id.clone(),
                method: e.method,
                cd: chamfer(&aligned, &pair.b)?,
                re_deg: rotation_error(&e.t, &pair.t_gt),
                te: translation_error(&e.t, &pair.t_gt),
                wall_ms: e.wall_ms,
                residual: e.residual,
            })
        })
        .collect()
}

/// Evaluates every pair of a dataset with each requested method. Pairs run
/// in parallel; rows come back in pair order, then method order.
pub fn eval(model: Option<&Model>, pairs: &[TrainPair], opts: &EvalOptions) -> Result<RegistrationReport> {
    if let Some(dir) = &opts.cloud_dir {
        fs::create_dir_all(dir)?;
    }
    let results: Vec<Result<Vec<ReportRow>>> = pool(opts.workers)?
        .install(|| pairs.par_iter().enumerate().map(|(i, p)| evaluate_pair(model, p, i, opts)).collect());
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(RegistrationReport::new(rows, &opts.methods))
}

/// Correspondences `src[i] → apply(src[i], T)` with a fraction of the
/// targets replaced by uniform points over the same bounding box.
pub fn synthetic_correspondences(n: usize, outlier_fraction: f64, seed: u64) -> Result<(CorrespondenceSet, RigidTransform, Vec<bool>)> {
    if !(0.0..1.0).contains(&outlier_fraction) {
        return Err(Error::invalid(format!("outlier fraction must lie in [0, 1), got {outlier_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
    let src: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen::<f64>(), rng.gen(), rng.gen()]).collect();
    let (t, _) = random_transform(sub_seed(seed, 1), [0.0, 45.0], [0.0, 0.8])?;
    let mut dst: Vec<[f64; 3]> = src.iter().map(|p| t.apply_point(p)).collect();
    let (lo, hi) = PointCloud::new(dst.clone())?.bounds();
    let n_out = (outlier_fraction * n as f64).round() as usize;
    let mut outlier = vec![false; n];
    for i in sample(&mut rng, n, n_out).into_vec() {
        dst[i] = [0, 1, 2].map(|d| rng.gen_range(lo[d]..=hi[d]));
        outlier[i] = true;
    }
    Ok((CorrespondenceSet::new(src, dst)?, t, outlier))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub outlier_fraction: f64,
    pub trials: usize,
    pub seed: u64,
    /// Success thresholds.
    pub max_re_deg: f64,
    pub max_te: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { n: 1024, m: 512, k: 4, outlier_fraction: 0.3, trials: 100, seed: 7, max_re_deg: 0.5, max_te: 0.005 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub trial: usize,
    pub method: String,
    pub re_deg: f64,
    pub te: f64,
    pub wall_ms: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub method: String,
    pub mean_re_deg: f64,
    pub mean_te: f64,
    pub mean_wall_ms: f64,
    pub successes: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub hardware: String,
    pub options: BenchOptions,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchSummary>,
}

impl BenchReport {
    pub fn summary_for(&self, method: &str) -> Option<&BenchSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{:.3},{}", r.trial, r.method, r.re_deg, r.te, r.wall_ms, r.residual);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.csv"), self.to_csv())?;
        fs::write(dir.join("bench.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// pdsac against sequential ransac at equal hypothesis counts on the same
/// correspondences and minimal-set seed. Trials run one after another so
/// timings are not skewed by other trials.
pub fn bench_consensus(opts: &BenchOptions) -> Result<BenchReport> {
    let ransac_cfg = RansacConfig { iterations: opts.m, k: opts.k, ..RansacConfig::default() };
    let mut rows = Vec::with_capacity(2 * opts.trials);
    for trial in 0..opts.trials {
        let (c, t_gt, _) = synthetic_correspondences(opts.n, opts.outlier_fraction, sub_seed(opts.seed, 2 * trial as u64))?;
        let seed = sub_seed(opts.seed, 2 * trial as u64 + 1);
        let start = Instant::now();
        let p = pdsac(&c, opts.m, opts.k, seed)?;
        let p_ms = ms(start);
        let start = Instant::now();
        let r = ransac(&c, &ransac_cfg, seed)?;
        let r_ms = ms(start);
        for (name, t, wall, residual) in [("pdsac", p.transform, p_ms, p.residual), ("ransac", r.transform, r_ms, r.residual)] {
            rows.push(BenchRow {
                trial,
                method: name.into(),
                re_deg: rotation_error(&t, &t_gt),
                te: translation_error(&t, &t_gt),
                wall_ms: wall,
                residual,
            });
        }
    }
    let summary = ["pdsac", "ransac"]
        .iter()
        .map(|&name| {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.method == name).collect();
            let n = sel.len().max(1) as f64;
            BenchSummary {
                method: name.into(),
                mean_re_deg: sel.iter().map(|r| r.re_deg).sum::<f64>() / n,
                mean_te: sel.iter().map(|r| r.te).sum::<f64>() / n,
                mean_wall_ms: sel.iter().map(|r| r.wall_ms).sum::<f64>() / n,
                successes: sel.iter().filter(|r| r.re_deg < opts.max_re_deg && r.te < opts.max_te).count(),
                trials: sel.len(),
            }
        })
        .collect();
    Ok(BenchReport { hardware: hardware_note(), options: *opts, rows, summary })
}
