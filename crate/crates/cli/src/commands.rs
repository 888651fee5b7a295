use std::fs;
use std::path::{Path, PathBuf};

use ilearn::astar::{dijkstra, evaluate, maze_set, summarize, train_iastar, GridPlanInstance, HeuristicNet, HeuristicNetConfig, IastarConfig, MazeConfig, generate_maze};
use ilearn::blo::run_selftest;
use ilearn::discrete::{control_variate_grad, score_function_grad, track_variance, CategoricalDistribution, GradientSampleBatch, VarianceTracker};
use ilearn::mpc::{impc_train, ImpcConfig};
use ilearn::mtsp::{evaluate_sampled, evaluate_sector, imtsp_train, variance_dominance, AllocationNet, ImtspConfig, MtspInstance};
use ilearn::pgo::{imperative_slam_train, seeded_fixture, PoseGraph2D, SlamConfig, SyntheticFrontEnd};
use ilearn_autodiff::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::run::{config_error, csv, load_config, CliError, CliResult, RunDir};
use crate::{Common, Kind};

/// Pretrained heuristic weights (defaults of `astar-train`, seed 0).
const PRETRAINED_IASTAR: &str = include_str!("../assets/iastar_weights.txt");

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn positive(key: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_error(key, format!("must be positive, got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> CliResult<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(config_error(key, "must be at least 1"))
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftestConfig {
    pub seed: u64,
    /// Random quadratic problems on top of the hand-derived cases.
    pub random: usize,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig { seed: 0, random: 20 }
    }
}

pub fn blo_selftest(common: &Common) -> CliResult<()> {
    let mut cfg: SelftestConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let mut dir = RunDir::create(&out_dir(common, "blo-selftest"), common.quiet)?;
    let report = run_selftest(cfg.seed, cfg.random)?;
    let rows = report.cases.iter().map(|c| {
        vec![c.name.clone(), c.relative_error.to_string(), c.tolerance.to_string(), c.cg_iterations.to_string(), c.passed.to_string()]
    });
    dir.write("metrics.csv", &csv("case,relative_error,tolerance,cg_iterations,passed", rows))?;
    dir.write("report.json", &(serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))? + "\n"))?;
    let failed = report.cases.iter().filter(|c| !c.passed).count();
    dir.phase(format!("selftest: {} cases, {failed} failed, max relative error {:e}", report.cases.len(), report.max_relative_error));
    dir.finish("blo-selftest", cfg.seed, &cfg)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{failed} selftest cases exceeded their tolerance")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AstarTrainConfig {
    pub seed: u64,
    pub train_maps: usize,
    pub heldout_maps: usize,
    pub height: usize,
    pub width: usize,
    pub perforation: f64,
    pub min_separation: f64,
    pub epochs: usize,
    pub w_a: f64,
    pub w_l: f64,
    pub lr: f64,
    pub temperature: f64,
    pub relaxation: f64,
    pub conv_width: usize,
    pub mlp_width: usize,
}

impl Default for AstarTrainConfig {
    fn default() -> Self {
        let m = MazeConfig::default();
        let t = IastarConfig::default();
        AstarTrainConfig {
            seed: 0,
            train_maps: 500,
            heldout_maps: 50,
            height: m.height,
            width: m.width,
            perforation: m.perforation,
            min_separation: m.min_separation,
            epochs: t.epochs,
            w_a: t.w_a,
            w_l: t.w_l,
            lr: t.lr,
            temperature: t.search.temperature,
            relaxation: t.search.relaxation,
            conv_width: t.net.conv_width,
            mlp_width: t.net.mlp_width,
        }
    }
}

fn maze_config(height: usize, width: usize, perforation: f64, min_separation: f64) -> CliResult<MazeConfig> {
    if height < 3 {
        return Err(config_error("height", format!("must be at least 3, got {height}")));
    }
    if width < 3 {
        return Err(config_error("width", format!("must be at least 3, got {width}")));
    }
    if !(0.0..=1.0).contains(&perforation) {
        return Err(config_error("perforation", format!("must lie in [0, 1], got {perforation}")));
    }
    if !(0.0..1.0).contains(&min_separation) {
        return Err(config_error("min_separation", format!("must lie in [0, 1), got {min_separation}")));
    }
    Ok(MazeConfig { height, width, perforation, min_separation })
}

impl AstarTrainConfig {
    fn validate(&self) -> CliResult<(MazeConfig, IastarConfig)> {
        let maze = maze_config(self.height, self.width, self.perforation, self.min_separation)?;
        nonzero("train_maps", self.train_maps)?;
        nonzero("epochs", self.epochs)?;
        nonzero("conv_width", self.conv_width)?;
        nonzero("mlp_width", self.mlp_width)?;
        positive("lr", self.lr)?;
        positive("temperature", self.temperature)?;
        positive("relaxation", self.relaxation)?;
        if !(self.w_a >= 0.0) {
            return Err(config_error("w_a", format!("must be nonnegative, got {}", self.w_a)));
        }
        if !(self.w_l >= 0.0) {
            return Err(config_error("w_l", format!("must be nonnegative, got {}", self.w_l)));
        }
        let mut t = IastarConfig { epochs: self.epochs, w_a: self.w_a, w_l: self.w_l, lr: self.lr, seed: self.seed, ..IastarConfig::default() };
        t.search.temperature = self.temperature;
        t.search.relaxation = self.relaxation;
        t.net = HeuristicNetConfig { conv_width: self.conv_width, mlp_width: self.mlp_width };
        Ok((maze, t))
    }
}

fn map_rows(metrics: &[ilearn::astar::MapMetrics]) -> impl Iterator<Item = Vec<String>> + '_ {
    metrics.iter().map(|m| vec![m.map_id.to_string(), m.exp_pct.to_string(), m.rt_pct.to_string(), m.cost_ratio.to_string()])
}

const MAP_HEADER: &str = "map_id,exp_pct,rt_pct,cost_ratio";

pub fn astar_train(common: &Common) -> CliResult<()> {
    let mut cfg: AstarTrainConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let (maze, tcfg) = cfg.validate()?;
    let mut dir = RunDir::create(&out_dir(common, "astar-train"), common.quiet)?;
    let train = maze_set(&maze, cfg.train_maps, cfg.seed.wrapping_mul(2).wrapping_add(1))?;
    let held = maze_set(&maze, cfg.heldout_maps, cfg.seed.wrapping_mul(2).wrapping_add(2))?;
    dir.phase(format!("generate: {} training and {} held-out {}x{} mazes", train.len(), held.len(), maze.height, maze.width));
    let out = train_iastar(&train, &[], &tcfg)?;
    let n = out.step_costs.len().min(train.len());
    let tail = &out.step_costs[out.step_costs.len() - n..];
    dir.phase(format!("train: {} epochs, final-epoch mean UL cost {:.3}", cfg.epochs, mean(tail)));
    dir.write("weights.txt", &out.net.params.to_text())?;
    let metrics = evaluate(&out.net, &held)?;
    dir.write("metrics.csv", &csv(MAP_HEADER, map_rows(&metrics)))?;
    let (exp, ok) = summarize(&metrics);
    dir.phase(format!("eval: held-out Exp {exp:.1}%, cost ratio <= 1.05 on {:.0}% of maps", 100.0 * ok));
    dir.finish("astar-train", cfg.seed, &cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AstarEvalConfig {
    pub seed: u64,
    /// Weights file; the shipped pretrained weights when absent.
    pub weights: Option<PathBuf>,
    /// Map files; `count` generated mazes when empty.
    pub maps: Vec<PathBuf>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub perforation: f64,
    pub min_separation: f64,
}

impl Default for AstarEvalConfig {
    fn default() -> Self {
        let m = MazeConfig::default();
        AstarEvalConfig {
            seed: 0,
            weights: None,
            maps: Vec::new(),
            count: 50,
            height: m.height,
            width: m.width,
            perforation: m.perforation,
            min_separation: m.min_separation,
        }
    }
}

pub fn astar_eval(common: &Common) -> CliResult<()> {
    let mut cfg: AstarEvalConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let maze = maze_config(cfg.height, cfg.width, cfg.perforation, cfg.min_separation)?;
    let mut dir = RunDir::create(&out_dir(common, "astar-eval"), common.quiet)?;
    let text = match &cfg.weights {
        Some(p) => read(p)?,
        None => PRETRAINED_IASTAR.to_string(),
    };
    let net = HeuristicNet::from_params(ParamStore::from_text(&text)?)?;
    let maps = if cfg.maps.is_empty() {
        nonzero("count", cfg.count)?;
        maze_set(&maze, cfg.count, cfg.seed)?
    } else {
        cfg.maps.iter().map(|p| Ok(GridPlanInstance::from_text(&read(p)?)?)).collect::<CliResult<Vec<_>>>()?
    };
    dir.phase(format!("load: {} maps, {} weights", maps.len(), if cfg.weights.is_some() { "given" } else { "pretrained" }));
    let metrics = evaluate(&net, &maps)?;
    dir.write("metrics.csv", &csv(MAP_HEADER, map_rows(&metrics)))?;
    let (exp, ok) = summarize(&metrics);
    let rt = mean(&metrics.iter().map(|m| m.rt_pct).collect::<Vec<_>>());
    dir.phase(format!("eval: Exp {exp:.1}%, Rt {rt:.1}%, cost ratio <= 1.05 on {:.0}% of maps", 100.0 * ok));
    dir.finish("astar-eval", cfg.seed, &cfg)
}

pub fn mpc_train(common: &Common) -> CliResult<()> {
    let mut cfg: ImpcConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    nonzero("horizon", cfg.horizon)?;
    nonzero("episodes", cfg.episodes)?;
    cfg.validate()?;
    let mut dir = RunDir::create(&out_dir(common, "mpc-train"), common.quiet)?;
    let out = impc_train(&cfg)?;
    let rows = out.history.iter().map(|r| {
        vec![r.episode.to_string(), r.ul_loss.to_string(), r.p_hat.to_string(), r.rmse.to_string(), r.st.to_string(), r.sse.to_string()]
    });
    dir.write("metrics.csv", &csv("episode,ul_loss,p_hat,rmse,st,sse", rows))?;
    let mut weights = out.denoiser.params.clone();
    weights.insert("p_hat", Tensor::vector(vec![out.p_hat]), false)?;
    dir.write("weights.txt", &weights.to_text())?;
    let (first, last) = (&out.history[0], &out.history[out.history.len() - 1]);
    dir.phase(format!(
        "train: {} episodes, p_hat {:.4} (error {:.2}%), RMSE {:.4} -> {:.4}",
        cfg.episodes,
        out.p_hat,
        100.0 * out.relative_p_error(cfg.p_true),
        first.rmse,
        last.rmse
    ));
    dir.finish("mpc-train", cfg.seed, &cfg)
}

pub fn pgo_train(common: &Common) -> CliResult<()> {
    let mut cfg: SlamConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    nonzero("iterations", cfg.iterations)?;
    cfg.validate()?;
    let mut dir = RunDir::create(&out_dir(common, "pgo-train"), common.quiet)?;
    let fixture = seeded_fixture(&cfg)?;
    dir.phase(format!("generate: {} poses, {} fixed edges", fixture.truth.len(), fixture.fixed_edges.len()));
    let out = imperative_slam_train(&fixture, &cfg, SyntheticFrontEnd::default())?;
    let rows = out.history.iter().map(|r| vec![r.iter.to_string(), r.ate_frontend.to_string(), r.ate_optimized.to_string()]);
    dir.write("metrics.csv", &csv("iter,ate_frontend,ate_optimized", rows))?;
    let mut weights = ParamStore::new();
    weights.insert("theta", out.front_end.theta(), true)?;
    dir.write("weights.txt", &weights.to_text())?;
    let (first, last) = (&out.history[0], &out.history[out.history.len() - 1]);
    dir.phase(format!(
        "train: {} iterations, front-end ATE {:.4} -> {:.4}, optimized ATE {:.4} -> {:.4}",
        cfg.iterations, first.ate_frontend, last.ate_frontend, first.ate_optimized, last.ate_optimized
    ));
    dir.finish("pgo-train", cfg.seed, &cfg)
}

pub fn mtsp_train(common: &Common) -> CliResult<()> {
    let mut cfg: ImtspConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    nonzero("iterations", cfg.iterations)?;
    cfg.validate()?;
    let mut dir = RunDir::create(&out_dir(common, "mtsp-train"), common.quiet)?;
    let out = imtsp_train(&cfg)?;
    let rows = out.history.iter().map(|r| vec![r.iter.to_string(), r.mean_minmax.to_string(), r.log_grad_variance.to_string()]);
    dir.write("metrics.csv", &csv("iter,mean_minmax,log_grad_variance", rows))?;
    dir.write("weights.txt", &out.net.params.to_text())?;
    if let Some(s) = &out.surrogate {
        dir.write("surrogate.txt", &s.params.to_text())?;
    }
    let tail = &out.history[out.history.len().saturating_sub(50)..];
    dir.phase(format!(
        "train: {} iterations, last-50 mean max-route {:.4}, variance below score on {:.0}% of post-warmup iterations",
        cfg.iterations,
        mean(&tail.iter().map(|r| r.mean_minmax).collect::<Vec<_>>()),
        100.0 * variance_dominance(&out.history, cfg.warmup)
    ));
    dir.finish("mtsp-train", cfg.seed, &cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtspEvalConfig {
    pub seed: u64,
    pub weights: Option<PathBuf>,
    /// Instance files; `count` random instances when empty.
    pub instances: Vec<PathBuf>,
    pub count: usize,
    pub agents: usize,
    pub min_cities: usize,
    pub max_cities: usize,
    /// Sampled allocations tried besides the greedy one; 0 evaluates greedy only.
    pub samples: usize,
}

impl Default for MtspEvalConfig {
    fn default() -> Self {
        let t = ImtspConfig::default();
        MtspEvalConfig {
            seed: 999,
            weights: None,
            instances: Vec::new(),
            count: 50,
            agents: t.agents,
            min_cities: t.min_cities,
            max_cities: t.max_cities,
            samples: 16,
        }
    }
}

pub fn mtsp_eval(common: &Common) -> CliResult<()> {
    let mut cfg: MtspEvalConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let Some(weights) = &cfg.weights else {
        return Err(config_error("weights", "is required"));
    };
    let net = AllocationNet::from_params(ParamStore::from_text(&read(weights)?)?)?;
    let instances = if cfg.instances.is_empty() {
        nonzero("count", cfg.count)?;
        let gen = ImtspConfig { agents: cfg.agents, min_cities: cfg.min_cities, max_cities: cfg.max_cities, ..ImtspConfig::default() };
        gen.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..cfg.count).map(|_| gen.instance(&mut rng)).collect::<ilearn::Result<Vec<_>>>()?
    } else {
        cfg.instances.iter().map(|p| Ok(MtspInstance::from_json(&read(p)?)?)).collect::<CliResult<Vec<_>>>()?
    };
    if let Some(bad) = instances.iter().find(|i| i.agents != net.agents) {
        return Err(CliError::Runtime(format!("instance has {} agents, weights were trained for {}", bad.agents, net.agents)));
    }
    let mut dir = RunDir::create(&out_dir(common, "mtsp-eval"), common.quiet)?;
    dir.phase(format!("load: {} instances", instances.len()));
    let ours = evaluate_sampled(&net, &instances, cfg.samples, cfg.seed)?;
    let base = evaluate_sector(&instances);
    let rows = ours.iter().zip(&base).enumerate().map(|(k, (a, b))| vec![k.to_string(), a.to_string(), b.to_string()]);
    dir.write("metrics.csv", &csv("instance_id,trained_minmax,sector_minmax", rows))?;
    dir.phase(format!("eval: mean max-route {:.4} trained vs {:.4} angular sector", mean(&ours), mean(&base)));
    dir.finish("mtsp-eval", cfg.seed, &cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub rows: usize,
    pub categories: usize,
    pub batches: usize,
    pub batch_size: usize,
    /// Weight of the non-additive part of the cost, which the linear
    /// surrogate cannot capture.
    pub coupling: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { seed: 0, rows: 3, categories: 4, batches: 200, batch_size: 8, coupling: 0.3 }
    }
}

pub fn estimator_bench(common: &Common) -> CliResult<()> {
    let mut cfg: BenchConfig = load_config(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    nonzero("rows", cfg.rows)?;
    if cfg.categories < 2 {
        return Err(config_error("categories", format!("must be at least 2, got {}", cfg.categories)));
    }
    if cfg.batches < 2 {
        return Err(config_error("batches", format!("must be at least 2, got {}", cfg.batches)));
    }
    nonzero("batch_size", cfg.batch_size)?;
    if !cfg.coupling.is_finite() {
        return Err(config_error("coupling", "must be finite"));
    }
    let mut dir = RunDir::create(&out_dir(common, "estimator-bench"), common.quiet)?;
    let (r, k) = (cfg.rows, cfg.categories);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let logits = Tensor::matrix(r, k, (0..r * k).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let table: Vec<f64> = (0..r * k).map(|_| rng.gen_range(0.0..2.0)).collect();
    let cost = |z: &[usize]| {
        let additive: f64 = z.iter().enumerate().map(|(row, &j)| table[row * k + j]).sum();
        additive + cfg.coupling * (z.iter().sum::<usize>() as f64).sin()
    };
    let surrogate = |z: &[usize]| z.iter().enumerate().map(|(row, &j)| table[row * k + j]).sum::<f64>();
    let dist = CategoricalDistribution::from_logits(logits.clone())?;
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let p = tape.softmax(l)?;
    let w = tape.constant(Tensor::matrix(r, k, table.clone())?);
    let s = tape.mul(w, p)?;
    let s = tape.sum(s);
    let pathwise = tape.grad(s, &[l])?.remove(0);

    let mut score_batches = Vec::with_capacity(cfg.batches);
    let mut cv_batches = Vec::with_capacity(cfg.batches);
    for _ in 0..cfg.batches {
        let samples: Vec<Vec<usize>> = (0..cfg.batch_size).map(|_| dist.sample(&mut rng)).collect();
        let scores = samples.iter().map(|z| dist.score(z)).collect::<ilearn::Result<Vec<_>>>()?;
        let batch = GradientSampleBatch::new(samples.iter().map(|z| cost(z)).collect(), scores);
        score_batches.push(score_function_grad(&batch)?);
        let batch = batch.with_surrogate(samples.iter().map(|z| surrogate(z)).collect(), vec![pathwise.clone(); cfg.batch_size]);
        cv_batches.push(control_variate_grad(&batch)?);
    }
    let score = track_variance(&mut VarianceTracker::new(), &score_batches)?;
    let cv = track_variance(&mut VarianceTracker::new(), &cv_batches)?;
    let series = |rows: &[ilearn::discrete::VarianceRow]| {
        csv("iteration,mean_log_variance", rows.iter().map(|v| vec![v.iteration.to_string(), v.mean_log_variance.to_string()]))
    };
    dir.write("metrics.csv", &series(&cv.series))?;
    dir.write("score_metrics.csv", &series(&score.series))?;
    let (a, b) = (score.series.last().unwrap().mean_log_variance, cv.series.last().unwrap().mean_log_variance);
    dir.phase(format!("bench: {} batches of {}, mean log-variance score {a:.4}, control variate {b:.4} (ratio {:.3})", cfg.batches, cfg.batch_size, (b - a).exp()));
    dir.finish("estimator-bench", cfg.seed, &cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeGenConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub perforation: f64,
    pub min_separation: f64,
}

impl Default for MazeGenConfig {
    fn default() -> Self {
        let m = MazeConfig::default();
        MazeGenConfig { seed: 0, count: 1, height: m.height, width: m.width, perforation: m.perforation, min_separation: m.min_separation }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtspGenConfig {
    pub seed: u64,
    pub count: usize,
    pub cities: usize,
    pub agents: usize,
}

impl Default for MtspGenConfig {
    fn default() -> Self {
        MtspGenConfig { seed: 0, count: 1, cities: 50, agents: 5 }
    }
}

pub fn generate(common: &Common, kind: Kind) -> CliResult<()> {
    match kind {
        Kind::Maze => {
            let mut cfg: MazeGenConfig = load_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            let maze = maze_config(cfg.height, cfg.width, cfg.perforation, cfg.min_separation)?;
            nonzero("count", cfg.count)?;
            let mut dir = RunDir::create(&out_dir(common, "generate"), common.quiet)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for k in 0..cfg.count {
                let inst = generate_maze(&maze, &mut rng)?;
                if !dijkstra(&inst)[inst.index(inst.goal())].is_finite() {
                    return Err(CliError::Runtime(format!("maze {k} has no path from start to goal")));
                }
                dir.write(&format!("maze_{k:03}.txt"), &inst.to_text())?;
            }
            dir.phase(format!("generate: {} mazes of {}x{}", cfg.count, cfg.height, cfg.width));
            dir.finish("generate maze", cfg.seed, &cfg)
        }
        Kind::Mtsp => {
            let mut cfg: MtspGenConfig = load_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            nonzero("count", cfg.count)?;
            nonzero("agents", cfg.agents)?;
            if cfg.cities < cfg.agents {
                return Err(config_error("cities", format!("must be at least agents ({}), got {}", cfg.agents, cfg.cities)));
            }
            let mut dir = RunDir::create(&out_dir(common, "generate"), common.quiet)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for k in 0..cfg.count {
                let inst = MtspInstance::random(&mut rng, cfg.cities, cfg.agents)?;
                dir.write(&format!("mtsp_{k:03}.json"), &(inst.to_json() + "\n"))?;
            }
            dir.phase(format!("generate: {} instances, {} cities, {} agents", cfg.count, cfg.cities, cfg.agents));
            dir.finish("generate mtsp", cfg.seed, &cfg)
        }
        Kind::PgoTrajectory => {
            let mut cfg: SlamConfig = load_config(common.config.as_deref())?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            let mut dir = RunDir::create(&out_dir(common, "generate"), common.quiet)?;
            let fixture = seeded_fixture(&cfg)?;
            let graph = fixture.graph(&SyntheticFrontEnd::default())?;
            dir.write("graph.txt", &graph.to_text())?;
            let truth = PoseGraph2D { nodes: fixture.truth.clone(), edges: Vec::new() };
            dir.write("truth.txt", &truth.to_text())?;
            dir.phase(format!("generate: {} poses, {} edges", graph.nodes.len(), graph.edges.len()));
            dir.finish("generate pgo-trajectory", cfg.seed, &cfg)
        }
    }
}
