//! The experiment commands. Every artifact lands in `out_dir` under a name
//! derived from the task, arm and seed, so commands can be chained.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::clock::{CpuClock, Stopwatch};
use crate::consistency::{ct_pretrain, ConsistencyModel};
use crate::diffusion::{dsm_pretrain, NoiseGrid, ScoreModel};
use crate::error::{Error, Result};
use crate::exp::checkpoint::{
    consistency_checkpoint, consistency_from_checkpoint, load_checkpoint, save_checkpoint, score_checkpoint,
    score_from_checkpoint,
};
use crate::exp::config::{Arm, ExperimentConfig};
use crate::exp::metrics::{
    metrics_path, read_rows, write_rows, AblationRow, BudgetRow, CsvAppender, LossRow, MetricsRow, TrajectoryRow,
};
use crate::exp::plot::{band, render_svg, BandPoint, Panel, Series};
use crate::rewards::{QueryCounter, Reward};
use crate::rng::stream;
use crate::rollout::{rollout, ConsistencyPolicy, Policy};
use crate::trainer::{evaluate, mean_std, train, EpochMetrics};

/// Stream index for model initialization and pretraining batches.
const PRETRAIN_STREAM: u64 = u64::MAX - 1;

/// Fractions of `samples ×` the diffusion per-trajectory cost used as total
/// budgets when none are configured.
pub const BUDGET_FRACTIONS: [f64; 6] = [1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0, 2.0];

pub fn pretrain_path(cfg: &ExperimentConfig, arm: Arm, seed: u64) -> PathBuf {
    cfg.out_dir
        .join(format!("pretrain_{}_{}_seed{seed}.ckpt", arm.name(), cfg.dataset().name()))
}

pub fn pretrain_loss_path(cfg: &ExperimentConfig, arm: Arm, seed: u64) -> PathBuf {
    cfg.out_dir
        .join(format!("pretrain_loss_{}_{}_seed{seed}.csv", arm.name(), cfg.dataset().name()))
}

pub fn finetune_path(cfg: &ExperimentConfig, arm: Arm, seed: u64) -> PathBuf {
    cfg.out_dir
        .join(format!("finetune_{}_{}_seed{seed}.ckpt", cfg.task.name(), arm.name()))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

/// Pretrains one model per seed (consistency training for `rlcm`,
/// denoising score matching for `ddpo`). Returns the checkpoint paths.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    cfg.archive(&format!("config_pretrain_{}.toml", cfg.arm.name()))?;
    let ds = cfg.dataset().build();
    let extra = |seed: u64| vec![("dataset", cfg.dataset().name().to_string()), ("seed", seed.to_string())];
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut rng = stream(seed, PRETRAIN_STREAM);
        let (ck, history) = match cfg.arm {
            Arm::Rlcm => {
                let m = ConsistencyModel::new(&cfg.model, ds.dim(), ds.contexts(), &mut rng)?;
                let (m, h) = ct_pretrain(m, ds.as_ref(), &cfg.ct, &mut rng)?;
                (consistency_checkpoint(&m, &extra(seed)), h)
            }
            Arm::Ddpo => {
                let m = ScoreModel::new(&cfg.model, cfg.diffusion_steps, ds.dim(), ds.contexts(), &mut rng)?;
                let (m, h) = dsm_pretrain(m, ds.as_ref(), &cfg.dsm, &mut rng)?;
                (score_checkpoint(&m, &extra(seed)), h)
            }
        };
        let path = pretrain_path(cfg, cfg.arm, seed);
        save_checkpoint(&path, &ck)?;
        let rows: Vec<LossRow> = history
            .logged()
            .into_iter()
            .map(|(iteration, loss)| LossRow { iteration, loss })
            .collect();
        write_rows(&pretrain_loss_path(cfg, cfg.arm, seed), &rows)?;
        out.push(path);
    }
    Ok(out)
}

pub fn load_consistency_policy(path: &Path, horizon: usize, rho: f64) -> Result<ConsistencyPolicy<f64>> {
    let model = consistency_from_checkpoint(&load_checkpoint(path)?)?;
    ConsistencyPolicy::with_horizon(model, horizon, rho)
}

pub fn load_score_model(path: &Path, cfg: &ExperimentConfig) -> Result<ScoreModel<f64>> {
    let mut model = score_from_checkpoint(&load_checkpoint(path)?)?;
    if model.horizon() != cfg.diffusion_steps {
        let c = model.config();
        let grid = NoiseGrid::geometric(cfg.diffusion_steps, c.eps, c.t_max)?;
        model.set_grid(grid);
    }
    Ok(model)
}

fn build_reward(cfg: &ExperimentConfig) -> Result<Box<dyn Reward>> {
    cfg.task.build(cfg.dataset(), cfg.scorer_seed)
}

/// Fine-tunes `policy` with the configured trainer, appending one metrics row
/// per epoch to `metrics`.
fn finetune_policy<P: Policy<f64>>(
    policy: &mut P,
    cfg: &ExperimentConfig,
    seed: u64,
    arm_label: &str,
    metrics: &Path,
) -> Result<Vec<EpochMetrics>> {
    let reward = QueryCounter::new(build_reward(cfg)?);
    let train_cfg = crate::trainer::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut log = CsvAppender::create(metrics)?;
    let task = cfg.task.name();
    train(policy, &reward, &train_cfg, &mut |_, m| {
        log.append(&MetricsRow::new(task, arm_label, seed, m))
    })
}

/// A missing input checkpoint is reported as [`Error::Missing`] so callers
/// can tell it apart from a malformed one.
fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(path.to_path_buf()))
    }
}

/// Fine-tunes the pretrained checkpoint of each seed. Returns the metrics
/// file paths, one per seed.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    cfg.archive(&format!("config_finetune_{}_{}.toml", cfg.task.name(), cfg.arm.name()))?;
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let src = pretrain_path(cfg, cfg.arm, seed);
        require(&src)?;
        let metrics = metrics_path(&cfg.out_dir, cfg.task.name(), cfg.arm.name(), seed);
        let extra = vec![
            ("task", cfg.task.name().to_string()),
            ("seed", seed.to_string()),
            ("epochs", cfg.train.epochs.to_string()),
            ("horizon", cfg.train.horizon.to_string()),
        ];
        let ck = match cfg.arm {
            Arm::Rlcm => {
                let mut p = load_consistency_policy(&src, cfg.train.horizon, cfg.rho)?;
                finetune_policy(&mut p, cfg, seed, cfg.arm.name(), &metrics)?;
                consistency_checkpoint(&p.model, &extra)
            }
            Arm::Ddpo => {
                let mut m = load_score_model(&src, cfg)?;
                finetune_policy(&mut m, cfg, seed, cfg.arm.name(), &metrics)?;
                score_checkpoint(&m, &extra)
            }
        };
        save_checkpoint(&finetune_path(cfg, cfg.arm, seed), &ck)?;
        out.push(metrics);
    }
    Ok(out)
}

/// Generates `n` trajectories one at a time from stream `(seed, i)`,
/// timing each with the calling thread's CPU clock. Contexts cycle.
pub fn timed_trajectories<P: Policy<f64> + ?Sized>(
    policy: &P,
    reward: &dyn Reward,
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let k = policy.contexts();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sw = Stopwatch::start(CpuClock::Thread);
        let tr = rollout(policy, i % k, stream(seed, i as u64))?;
        let secs = sw.cpu_seconds();
        out.push((secs, reward.score(&tr.terminal_f64(), tr.context)?));
    }
    Ok(out)
}

/// Per-sample inference seconds: the median over `repeats` timed passes of
/// `n` sequential trajectories.
pub fn inference_seconds<P: Policy<f64> + ?Sized>(
    policy: &P,
    reward: &dyn Reward,
    n: usize,
    seed: u64,
    repeats: usize,
) -> Result<f64> {
    let mut per = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = timed_trajectories(policy, reward, n, seed)?;
        per.push(t.iter().map(|p| p.0).sum::<f64>() / n as f64);
    }
    per.sort_by(f64::total_cmp);
    Ok(per[per.len() / 2])
}

/// Fine-tunes and evaluates at each configured horizon. Writes the ablation
/// table and its two-panel figure; returns the rows.
pub fn cmd_ablate_horizon(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    cfg.archive(&format!("config_ablate_{}.toml", cfg.task.name()))?;
    let reward = build_reward(cfg)?;
    let mut rows = Vec::new();
    for &h in &cfg.eval.horizons {
        for &seed in &cfg.seeds {
            let src = pretrain_path(cfg, Arm::Rlcm, seed);
            require(&src)?;
            let mut p = load_consistency_policy(&src, h, cfg.rho)?;
            let label = format!("rlcm-h{h}");
            let train_cfg = ExperimentConfig {
                train: crate::trainer::TrainConfig {
                    horizon: h,
                    ..cfg.train.clone()
                },
                ..cfg.clone()
            };
            finetune_policy(
                &mut p,
                &train_cfg,
                seed,
                &label,
                &metrics_path(&cfg.out_dir, cfg.task.name(), &label, seed),
            )?;
            let ev = evaluate(&p, reward.as_ref(), cfg.eval.samples, cfg.eval.seed, 1)?;
            let infer = inference_seconds(&p, reward.as_ref(), cfg.eval.samples, cfg.eval.seed, 3)?;
            rows.push(AblationRow {
                task: cfg.task.name().to_string(),
                seed,
                horizon: h,
                reward_mean: ev.mean,
                reward_std: ev.std,
                infer_seconds: infer,
            });
        }
    }
    let table = cfg.out_dir.join(format!("ablation_{}.csv", cfg.task.name()));
    write_rows(&table, &rows)?;
    write_text(
        &cfg.out_dir.join(format!("figure_ablation_{}.svg", cfg.task.name())),
        &ablation_svg(&rows)?,
    )?;
    Ok(rows)
}

/// Number of leading trajectories whose cumulative cost fits in `budget`.
pub fn completed_within(seconds: &[f64], budget: f64) -> usize {
    let mut total = 0.0;
    seconds
        .iter()
        .take_while(|&&s| {
            total += s;
            total <= budget
        })
        .count()
}

/// Output of the time-budget sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetReport {
    pub trajectories: Vec<TrajectoryRow>,
    pub points: Vec<BudgetRow>,
}

/// Budget rows for one `(arm, seed)` trajectory log.
pub fn budget_rows(log: &[TrajectoryRow], budgets: &[f64]) -> Vec<BudgetRow> {
    let secs: Vec<f64> = log.iter().map(|t| t.seconds).collect();
    budgets
        .iter()
        .map(|&b| {
            let n = completed_within(&secs, b);
            let reward_mean = (n > 0).then(|| log[..n].iter().map(|t| t.reward).sum::<f64>() / n as f64);
            BudgetRow {
                task: log.first().map(|t| t.task.clone()).unwrap_or_default(),
                arm: log.first().map(|t| t.arm.clone()).unwrap_or_default(),
                seed: log.first().map(|t| t.seed).unwrap_or_default(),
                budget_seconds: b,
                completed: n,
                reward_mean,
            }
        })
        .collect()
}

/// Generates `eval.samples` sequential trajectories per fine-tuned
/// checkpoint of both arms, then reports the mean reward of those that
/// complete within each total budget.
pub fn cmd_eval_time_budget(cfg: &ExperimentConfig) -> Result<BudgetReport> {
    cfg.validate()?;
    cfg.archive(&format!("config_budget_{}.toml", cfg.task.name()))?;
    let reward = build_reward(cfg)?;
    let n = cfg.eval.samples;
    let mut logs: Vec<Vec<TrajectoryRow>> = Vec::new();
    for arm in [Arm::Rlcm, Arm::Ddpo] {
        for &seed in &cfg.seeds {
            let path = finetune_path(cfg, arm, seed);
            require(&path)?;
            let timed = match arm {
                Arm::Rlcm => {
                    let p = load_consistency_policy(&path, cfg.train.horizon, cfg.rho)?;
                    timed_trajectories(&p, reward.as_ref(), n, cfg.eval.seed)?
                }
                Arm::Ddpo => {
                    let m = load_score_model(&path, cfg)?;
                    timed_trajectories(&m, reward.as_ref(), n, cfg.eval.seed)?
                }
            };
            logs.push(
                timed
                    .into_iter()
                    .enumerate()
                    .map(|(index, (seconds, r))| TrajectoryRow {
                        task: cfg.task.name().to_string(),
                        arm: arm.name().to_string(),
                        seed,
                        index,
                        seconds,
                        reward: r,
                    })
                    .collect(),
            );
        }
    }
    let budgets = if cfg.eval.budgets.is_empty() {
        let ddpo: Vec<f64> = logs
            .iter()
            .flatten()
            .filter(|t| t.arm == Arm::Ddpo.name())
            .map(|t| t.seconds)
            .collect();
        let per_traj = mean_std(&ddpo).0;
        BUDGET_FRACTIONS.iter().map(|f| f * per_traj * n as f64).collect()
    } else {
        cfg.eval.budgets.clone()
    };
    let points: Vec<BudgetRow> = logs.iter().flat_map(|l| budget_rows(l, &budgets)).collect();
    let trajectories: Vec<TrajectoryRow> = logs.into_iter().flatten().collect();
    let task = cfg.task.name();
    write_rows(&cfg.out_dir.join(format!("trajectories_{task}.csv")), &trajectories)?;
    write_rows(&cfg.out_dir.join(format!("budget_{task}.csv")), &points)?;
    write_text(
        &cfg.out_dir.join(format!("figure_budget_{task}.svg")),
        &budget_svg(&points)?,
    )?;
    Ok(BudgetReport { trajectories, points })
}

fn series_from_groups(groups: BTreeMap<String, Vec<Vec<(f64, f64)>>>) -> Result<Vec<Series>> {
    groups
        .into_iter()
        .map(|(label, runs)| Ok(Series { label, points: band(&runs)? }))
        .collect()
}

/// Reward-vs-queries and reward-vs-CPU-seconds panels, one series per arm,
/// bands across seeds.
pub fn metrics_svg(rows: &[MetricsRow]) -> Result<String> {
    let mut by_run: BTreeMap<(String, u64), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_run.entry((r.arm.clone(), r.seed)).or_default().push(r);
    }
    let mut queries: BTreeMap<String, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    let mut cpu: BTreeMap<String, Vec<Vec<(f64, f64)>>> = BTreeMap::new();
    for ((arm, _), mut run) in by_run {
        run.sort_by_key(|r| r.epoch);
        let mut elapsed = 0.0;
        let mut vs_cpu = Vec::with_capacity(run.len());
        for r in &run {
            elapsed += r.cpu_seconds;
            vs_cpu.push((elapsed, r.reward_mean));
        }
        queries
            .entry(arm.clone())
            .or_default()
            .push(run.iter().map(|r| (r.reward_queries as f64, r.reward_mean)).collect());
        cpu.entry(arm).or_default().push(vs_cpu);
    }
    let task = rows.first().map(|r| r.task.as_str()).unwrap_or("");
    render_svg(&[
        Panel {
            title: format!("{task}: reward by queries"),
            x_label: "reward queries".into(),
            y_label: "mean reward".into(),
            series: series_from_groups(queries)?,
        },
        Panel {
            title: format!("{task}: reward by CPU time"),
            x_label: "CPU seconds".into(),
            y_label: "mean reward".into(),
            series: series_from_groups(cpu)?,
        },
    ])
}

fn horizon_band(rows: &[AblationRow], value: impl Fn(&AblationRow) -> f64) -> Vec<BandPoint> {
    let mut by_h: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_h.entry(r.horizon).or_default().push(value(r));
    }
    by_h.into_iter()
        .map(|(h, v)| {
            let (mean, std) = mean_std(&v);
            BandPoint { x: h as f64, mean, std }
        })
        .collect()
}

pub fn ablation_svg(rows: &[AblationRow]) -> Result<String> {
    let task = rows.first().map(|r| r.task.as_str()).unwrap_or("");
    render_svg(&[
        Panel {
            title: format!("{task}: quality by horizon"),
            x_label: "horizon H".into(),
            y_label: "final mean reward".into(),
            series: vec![Series {
                label: "rlcm".into(),
                points: horizon_band(rows, |r| r.reward_mean),
            }],
        },
        Panel {
            title: format!("{task}: inference time by horizon"),
            x_label: "horizon H".into(),
            y_label: "CPU seconds per sample".into(),
            series: vec![Series {
                label: "rlcm".into(),
                points: horizon_band(rows, |r| r.infer_seconds),
            }],
        },
    ])
}

/// Mean reward against total budget per arm. A budget where no seed
/// completes a trajectory is left out of the line rather than drawn at 0.
pub fn budget_svg(rows: &[BudgetRow]) -> Result<String> {
    let mut by_arm: BTreeMap<&str, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        if let Some(m) = r.reward_mean {
            by_arm
                .entry(&r.arm)
                .or_default()
                .entry(r.budget_seconds.to_bits())
                .or_default()
                .push(m);
        }
    }
    let series = by_arm
        .into_iter()
        .map(|(arm, pts)| {
            let mut points: Vec<BandPoint> = pts
                .into_iter()
                .map(|(bits, v)| {
                    let (mean, std) = mean_std(&v);
                    BandPoint { x: f64::from_bits(bits), mean, std }
                })
                .collect();
            points.sort_by(|a, b| a.x.total_cmp(&b.x));
            Series { label: arm.to_string(), points }
        })
        .collect();
    let task = rows.first().map(|r| r.task.as_str()).unwrap_or("");
    render_svg(&[Panel {
        title: format!("{task}: reward within a time budget"),
        x_label: "total CPU seconds".into(),
        y_label: "mean reward of completed".into(),
        series,
    }])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FileKind {
    Metrics,
    Ablation,
    Budget,
}

fn classify(path: &Path) -> Result<FileKind> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let header = text.lines().next().unwrap_or("");
    let cols: Vec<&str> = header.split(',').collect();
    let kind = if cols.contains(&"reward_queries") {
        FileKind::Metrics
    } else if cols.contains(&"horizon") {
        FileKind::Ablation
    } else if cols.contains(&"budget_seconds") {
        FileKind::Budget
    } else {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "header does not match any metrics schema".into(),
        });
    };
    Ok(kind)
}

/// Renders figures from metrics files alone. Training metrics are grouped
/// by task; ablation and budget tables each give one figure. Returns the
/// written paths.
pub fn cmd_plot(files: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if files.is_empty() {
        return Err(Error::Config("no metrics files given".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut training: BTreeMap<String, Vec<MetricsRow>> = BTreeMap::new();
    let mut out = Vec::new();
    let mut files = files.to_vec();
    files.sort();
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("figure");
        match classify(f)? {
            FileKind::Metrics => {
                let rows: Vec<MetricsRow> = read_rows(f)?;
                if rows.is_empty() {
                    return Err(Error::Contract(format!("{} has no rows", f.display())));
                }
                for r in rows {
                    training.entry(r.task.clone()).or_default().push(r);
                }
            }
            FileKind::Ablation => {
                let rows: Vec<AblationRow> = read_rows(f)?;
                out.push(write_text(&out_dir.join(format!("figure_{stem}.svg")), &ablation_svg(&rows)?)?);
            }
            FileKind::Budget => {
                let rows: Vec<BudgetRow> = read_rows(f)?;
                out.push(write_text(&out_dir.join(format!("figure_{stem}.svg")), &budget_svg(&rows)?)?);
            }
        }
    }
    for (task, rows) in training {
        out.push(write_text(&out_dir.join(format!("figure_training_{task}.svg")), &metrics_svg(&rows)?)?);
    }
    Ok(out)
}
