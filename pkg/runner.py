"""
Experiment orchestration: typed experiment configuration, single runs with
their on-disk artifacts, ablation sweeps and the post-hoc eval/export tools.
"""

import csv
import glob
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config as env_config
import jsonlog
from checkpoint import load_checkpoint, pack_agent, prefixed, save_checkpoint, unpack_policy
from environments import (BanditSpec, EnvSpec, MazeSpec, SparseChainSpec, region_mass, visitation_histogram,
                          write_heatmap_csv)
from policy_opt import CemConfig, PPOConfig, cem_baseline, collect_rollouts, train_self_imitation
from svpg import EnsembleConfig, off_diagonal, train_ensemble

logger = jsonlog.setup_logger("runner")

ALGORITHMS = ("ppo", "si", "si-interact-js", "si-interact-rbf", "si-independent", "cem")
ENSEMBLE_KERNELS = {"si-interact-js": "js", "si-interact-rbf": "rbf", "si-independent": "independent"}
SWEEP_AXES = {"nu": "SI_NU", "capacity": "SI_CAPACITY", "p_m": "ENV_MASK_PROB"}

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
EVENTS_FILE = "events.jsonl"
CHECKPOINT_FILE = "checkpoint.divmin"
CONFIG_COPY = "config.env"
ERROR_MARKER = "ERROR"
REPLAY_FILE = "replay.jsonl"


@dataclass
class ExperimentConfig:
    algorithm: str
    env: EnvSpec
    ppo: PPOConfig
    ensemble: EnsembleConfig
    cem: CemConfig
    seed: int
    output_dir: str
    workers: int = 1
    log_level: str = "INFO"
    heatmap_resolution: int = 20
    final_window: float = 0.1
    eval_episodes: int = 10
    dump_replay: bool = True
    source: Optional[env_config.Config] = field(default=None, repr=False, compare=False)

    @property
    def nu(self) -> float:
        return self.ppo.nu

    @property
    def capacity(self) -> int:
        return self.ppo.replay_capacity

    @property
    def iterations(self) -> int:
        return self.ppo.iterations

    @property
    def is_ensemble(self) -> bool:
        return self.algorithm in ENSEMBLE_KERNELS

    def validate(self) -> List[str]:
        problems = []
        if self.algorithm not in ALGORITHMS:
            problems.append(f"RUN_ALGORITHM must be one of {ALGORITHMS}, got {self.algorithm!r}")
        problems.extend(self.env.validate())
        if self.is_ensemble:
            problems.extend(self.ensemble.validate())
        elif self.algorithm == "cem":
            problems.extend(self.cem.validate())
        else:
            problems.extend(self.ppo.validate())
        if self.workers < 1:
            problems.append(f"RUN_WORKERS must be >= 1, got {self.workers}")
        if self.heatmap_resolution < 1:
            problems.append(f"RUN_HEATMAP_RESOLUTION must be >= 1, got {self.heatmap_resolution}")
        if not (0.0 < self.final_window <= 1.0):
            problems.append(f"RUN_FINAL_WINDOW must be in (0, 1], got {self.final_window}")
        return problems

    @classmethod
    def from_config(cls, cfg: env_config.Config) -> "ExperimentConfig":
        """Typed view of a Config; every malformed or invalid field is reported in one ConfigError."""
        problems: List[str] = []

        def read(getter: Callable[[str], Any], key: str, fallback: Any = None) -> Any:
            try:
                return getter(key)
            except env_config.ConfigError as e:
                problems.append(str(e))
                return fallback

        algorithm = cfg.get_str('RUN_ALGORITHM').strip().lower()
        iterations = read(cfg.get_int, 'RUN_ITERATIONS', 1)
        horizon_text = cfg.get_str('ENV_HORIZON').strip()
        horizon = read(cfg.get_int, 'ENV_HORIZON', None) if horizon_text else None

        maze = MazeSpec(max_speed=read(cfg.get_float, 'ENV_MAZE_MAX_SPEED', 0.05),
                        motion_noise=read(cfg.get_float, 'ENV_MAZE_MOTION_NOISE', 0.0),
                        start_noise=read(cfg.get_float, 'ENV_MAZE_START_NOISE', 0.0))
        chain = SparseChainSpec(distance=read(cfg.get_float, 'ENV_CHAIN_DISTANCE', 1.0),
                                action_cost=read(cfg.get_float, 'ENV_CHAIN_ACTION_COST', 0.0),
                                max_step=read(cfg.get_float, 'ENV_CHAIN_MAX_STEP', 0.1),
                                shaping=cfg.get_str('ENV_CHAIN_SHAPING').strip().lower())
        if horizon is not None:
            maze.horizon = horizon
            chain.horizon = horizon
        env = EnvSpec(name=cfg.get_str('ENV_NAME').strip().lower(),
                      reward_mode=cfg.get_str('ENV_REWARD_MODE').strip().lower(),
                      mask_prob=read(cfg.get_float, 'ENV_MASK_PROB', 0.0),
                      maze=maze, chain=chain,
                      bandit=BanditSpec(p=read(cfg.get_float, 'ENV_BANDIT_P', 0.45),
                                        eps=read(cfg.get_float, 'ENV_BANDIT_EPS', 0.1)))

        ppo = PPOConfig(gamma=read(cfg.get_float, 'PPO_GAMMA', 0.99),
                        lam=read(cfg.get_float, 'PPO_LAMBDA', 0.95),
                        clip_eps=read(cfg.get_float, 'PPO_CLIP', 0.2),
                        epochs=read(cfg.get_int, 'PPO_EPOCHS', 1),
                        minibatch=read(cfg.get_int, 'PPO_MINIBATCH', 64),
                        lr=read(cfg.get_float, 'PPO_LR', 1e-4),
                        value_lr=read(cfg.get_float, 'PPO_VALUE_LR', 1e-3),
                        nu=read(cfg.get_float, 'SI_NU', 0.8),
                        iterations=iterations,
                        batch_episodes=read(cfg.get_int, 'PPO_BATCH_EPISODES', 8),
                        replay_capacity=read(cfg.get_int, 'SI_CAPACITY', 10),
                        disc_epochs=read(cfg.get_int, 'SI_DISC_EPOCHS', 3),
                        disc_minibatch=read(cfg.get_int, 'SI_DISC_MINIBATCH', 64),
                        disc_lr=read(cfg.get_float, 'SI_DISC_LR', 1e-4),
                        hidden=tuple(read(cfg.get_ints, 'PPO_HIDDEN', [64, 64])),
                        init_log_std=read(cfg.get_float, 'PPO_INIT_LOG_STD', 0.0),
                        self_imitation=algorithm != "ppo")

        seeds = read(cfg.get_ints, 'SVPG_SEEDS', [])
        ensemble = EnsembleConfig(n_agents=read(cfg.get_int, 'SVPG_AGENTS', 8),
                                  temperature=read(cfg.get_float, 'SVPG_TEMPERATURE', 0.5),
                                  alpha0=read(cfg.get_float, 'SVPG_ALPHA0', 10.0),
                                  alpha_decay_end=read(cfg.get_float, 'SVPG_ALPHA_DECAY_END', 0.8),
                                  kernel=ENSEMBLE_KERNELS.get(algorithm, "js"),
                                  ratio_mode=cfg.get_str('SVPG_RATIO_MODE').strip().lower(),
                                  density_epochs=read(cfg.get_int, 'SVPG_DENSITY_EPOCHS', 3),
                                  density_minibatch=read(cfg.get_int, 'SVPG_DENSITY_MINIBATCH', 64),
                                  density_lr=read(cfg.get_float, 'SVPG_DENSITY_LR', 1e-3),
                                  density_hidden=ppo.hidden,
                                  reference_margin=read(cfg.get_float, 'SVPG_REFERENCE_MARGIN', 0.1),
                                  reference_min_width=read(cfg.get_float, 'SVPG_REFERENCE_MIN_WIDTH', 0.1),
                                  ppo=ppo,
                                  seeds=seeds or None)
        cem = CemConfig(population=read(cfg.get_int, 'CEM_POPULATION', 20),
                        elite_frac=read(cfg.get_float, 'CEM_ELITE_FRAC', 0.2),
                        init_std=read(cfg.get_float, 'CEM_INIT_STD', 0.5),
                        episodes=read(cfg.get_int, 'CEM_EPISODES', 1),
                        iterations=iterations,
                        hidden=ppo.hidden)

        experiment = cls(algorithm=algorithm, env=env, ppo=ppo, ensemble=ensemble, cem=cem,
                         seed=read(cfg.get_int, 'RUN_SEED', 0),
                         output_dir=resolve_output_dir(cfg.get_str('RUN_OUTPUT_DIR'), cfg.get_str('RUN_OUTPUT_ROOT')),
                         workers=read(cfg.get_int, 'RUN_WORKERS', 1),
                         log_level=cfg.get_str('RUN_LOG_LEVEL') or "INFO",
                         heatmap_resolution=read(cfg.get_int, 'RUN_HEATMAP_RESOLUTION', 20),
                         final_window=read(cfg.get_float, 'RUN_FINAL_WINDOW', 0.1),
                         eval_episodes=read(cfg.get_int, 'RUN_EVAL_EPISODES', 10),
                         dump_replay=read(cfg.get_bool, 'RUN_DUMP_REPLAY', True),
                         source=cfg)
        if not problems:
            problems.extend(experiment.validate())
        if problems:
            raise env_config.ConfigError("; ".join(problems), problems=problems)
        return experiment


def resolve_output_dir(output_dir: str, output_root: str = "") -> str:
    if output_root and not os.path.isabs(output_dir):
        return os.path.join(output_root, output_dir)
    return output_dir


def final_score(records: Sequence[Dict[str, Any]], window_frac: float = 0.1) -> float:
    """Mean return over the final window; for ensembles the best agent's window mean."""
    if not records:
        return float("nan")
    window = max(1, int(round(window_frac * len(records))))
    tail = records[-window:]
    if 'agents' in tail[0]:
        n = len(tail[0]['agents'])
        return float(max(np.mean([r['agents'][i]['env_return_mean'] for r in tail]) for i in range(n)))
    return float(np.mean([r['env_return_mean'] for r in tail]))


def read_metrics(run_dir: str) -> List[Dict[str, Any]]:
    with open(os.path.join(run_dir, METRICS_FILE), 'r', encoding='utf-8') as fh:
        return [json.loads(line) for line in fh if line.strip()]


class RunDirectory:
    """Owns one run's output tree and writes its artifacts as the run progresses."""

    def __init__(self, path: str):
        self.path = path
        self.logger = logger
        os.makedirs(path, exist_ok=True)
        stale_files = [self.file(ERROR_MARKER), self.file(EVENTS_FILE), self.file(REPLAY_FILE)]
        stale_files += glob.glob(self.file("kernel_*.csv")) + glob.glob(self.file("heatmap*.csv"))
        for stale in stale_files:
            if os.path.exists(stale):
                os.remove(stale)
        self._metrics = open(self.file(METRICS_FILE), 'w', encoding='utf-8')
        self._timing = open(self.file(TIMING_FILE), 'w', encoding='utf-8')

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    def write_iteration(self, record: Dict[str, Any], wall_ms: float) -> None:
        self._metrics.write(json.dumps(record) + "\n")
        self._metrics.flush()
        self._timing.write(json.dumps({'iteration': record['iteration'], 'wall_ms': round(wall_ms, 3)}) + "\n")
        self._timing.flush()

    def write_kernel(self, iteration: int, kernel: np.ndarray) -> None:
        np.savetxt(self.file(f"kernel_{iteration:03d}.csv"), kernel, delimiter=",", fmt="%.10g")

    def write_config(self, cfg: Optional[env_config.Config]) -> None:
        if cfg is None:
            return
        with open(self.file(CONFIG_COPY), 'w', encoding='utf-8') as fh:
            fh.write(cfg.dump())

    def write_error(self, error: BaseException) -> None:
        with open(self.file(ERROR_MARKER), 'w', encoding='utf-8') as fh:
            fh.write("".join(traceback.format_exception(type(error), error, error.__traceback__)))

    def close(self) -> None:
        self._metrics.close()
        self._timing.close()


def _write_heatmaps(run_dir: RunDirectory, experiment: ExperimentConfig, trajectories_by_agent: List[list],
                    best: int) -> None:
    if experiment.env.name != "maze":
        return
    maze = experiment.env.maze
    for i, trajectories in enumerate(trajectories_by_agent):
        grid = visitation_histogram(trajectories, experiment.heatmap_resolution)
        if len(trajectories_by_agent) > 1:
            write_heatmap_csv(grid, run_dir.file(f"heatmap_agent{i}.csv"))
        if i == best:
            write_heatmap_csv(grid, run_dir.file("heatmap.csv"))
        green = region_mass(trajectories, maze.green_center, maze.green_radius)
        red = region_mass(trajectories, maze.red_center, maze.red_radius)
        logger.info(f"Agent {i} visitation: green {green:.3f}, red {red:.3f}",
                    extra={'agent': i, 'green_mass': green, 'red_mass': red})


def _run_single(experiment: ExperimentConfig, run_dir: RunDirectory) -> List[Dict[str, Any]]:
    result = train_self_imitation(experiment.env.factory(), experiment.ppo, experiment.seed,
                                  workers=experiment.workers, on_iteration=run_dir.write_iteration)
    agent = result.agent
    save_checkpoint(run_dir.file(CHECKPOINT_FILE), pack_agent(agent, "agent0"),
                    meta={'algorithm': experiment.algorithm, 'seed': experiment.seed, 'n_agents': 1, 'best_agent': 0})
    if result.last_batch is not None:
        _write_heatmaps(run_dir, experiment, [result.last_batch.trajectories], 0)
    if experiment.dump_replay and agent.discriminator is not None:
        agent.replay.dump_jsonl(run_dir.file(REPLAY_FILE))
    return result.metrics


def _run_ensemble(experiment: ExperimentConfig, run_dir: RunDirectory) -> List[Dict[str, Any]]:
    def on_iteration(record, kernel, wall_ms):
        run_dir.write_iteration(record, wall_ms)
        run_dir.write_kernel(record['iteration'], kernel)

    result = train_ensemble(experiment.env.factory(), experiment.ensemble, experiment.seed,
                            workers=experiment.workers, on_iteration=on_iteration)
    params = {}
    for i, agent in enumerate(result.agents):
        params.update(pack_agent(agent, f"agent{i}"))
    for i, model in enumerate(result.density_models):
        params.update(prefixed(f"density{i}", model.net.weights))
    save_checkpoint(run_dir.file(CHECKPOINT_FILE), params,
                    meta={'algorithm': experiment.algorithm, 'seed': experiment.seed,
                          'n_agents': len(result.agents), 'best_agent': result.best_agent})
    _write_heatmaps(run_dir, experiment, [batch.trajectories for batch in result.last_batches], result.best_agent)
    return result.metrics


def _run_cem(experiment: ExperimentConfig, run_dir: RunDirectory) -> List[Dict[str, Any]]:
    metrics = []

    def on_generation(trace_record, wall_ms):
        record = {'iteration': trace_record['generation'],
                  'env_return_mean': trace_record['elite_return_mean'],
                  'best_return': trace_record['best_return'],
                  'population_return_mean': trace_record['population_return_mean']}
        metrics.append(record)
        run_dir.write_iteration(record, wall_ms)

    cem = experiment.cem
    policy, _ = cem_baseline(experiment.env.factory(), cem.population, cem.elite_frac, cem.iterations,
                             experiment.seed, episodes=cem.episodes, hidden=cem.hidden, init_std=cem.init_std,
                             on_generation=on_generation)
    save_checkpoint(run_dir.file(CHECKPOINT_FILE), prefixed("agent0/policy", policy.flat()),
                    meta={'algorithm': 'cem', 'seed': experiment.seed, 'n_agents': 1, 'best_agent': 0})
    return metrics


def run(experiment: ExperimentConfig) -> int:
    """Execute one experiment; 0 on success, 1 on failure (ERROR marker written next to partial artifacts)."""
    jsonlog.set_level(experiment.log_level)
    run_dir = RunDirectory(experiment.output_dir)
    handler = jsonlog.attach_run_log(run_dir.file(EVENTS_FILE))
    try:
        run_dir.write_config(experiment.source)
        logger.info(f"Run started: {experiment.algorithm} on {experiment.env.name}/{experiment.env.reward_mode}",
                    extra={'seed': experiment.seed, 'output_dir': experiment.output_dir})
        if experiment.is_ensemble:
            metrics = _run_ensemble(experiment, run_dir)
        elif experiment.algorithm == "cem":
            metrics = _run_cem(experiment, run_dir)
        else:
            metrics = _run_single(experiment, run_dir)
        score = final_score(metrics, experiment.final_window)
        logger.info(f"Run finished: final score {score:.4f}", extra={'final_score': score})
        return 0
    except Exception as e:
        logger.error(f"Run failed: {e}", extra={'output_dir': experiment.output_dir})
        run_dir.write_error(e)
        return 1
    finally:
        run_dir.close()
        jsonlog.detach_run_log(handler)


# ===== Sweeps =====

def _run_cell(cell_config: env_config.Config) -> Tuple[int, Optional[float]]:
    try:
        experiment = ExperimentConfig.from_config(cell_config)
        status = run(experiment)
        if status != 0:
            return status, None
        return 0, final_score(read_metrics(experiment.output_dir), experiment.final_window)
    except Exception as e:
        logger.error(f"Sweep cell failed: {e}")
        return 1, None


def sweep(base: env_config.Config, axis: str, values: Sequence[Any], seeds: Sequence[int],
          workers: int = 1) -> Optional[str]:
    """
    Run the full (value x seed) grid, one output directory per cell, and write
    summary.csv (mean and std of the final-window score per value) plus cells.csv.
    """
    if axis not in SWEEP_AXES:
        logger.error(f"Unknown sweep axis {axis!r}, expected one of {sorted(SWEEP_AXES)}")
        return None
    key = SWEEP_AXES[axis]
    root = os.path.abspath(resolve_output_dir(base.get_str('RUN_OUTPUT_DIR'), base.get_str('RUN_OUTPUT_ROOT')))
    os.makedirs(root, exist_ok=True)

    cells: List[Tuple[Any, int, env_config.Config]] = []
    for value in values:
        for seed in seeds:
            overrides = {key: value, 'RUN_SEED': seed,
                         'RUN_OUTPUT_DIR': os.path.join(root, f"{axis}={value}", f"seed={seed}")}
            if axis == "p_m":
                overrides['ENV_REWARD_MODE'] = "noisy"
            cells.append((value, seed, base.with_overrides(overrides)))

    logger.info(f"Sweep over {axis}: {len(values)} values x {len(seeds)} seeds", extra={'cells': len(cells)})
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell, [c for _, _, c in cells]))
    else:
        outcomes = [_run_cell(c) for _, _, c in cells]

    with open(os.path.join(root, "cells.csv"), 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "seed", "status", "score"])
        for (value, seed, _), (status, score) in zip(cells, outcomes):
            writer.writerow([axis, value, seed, "ok" if status == 0 else "failed", "" if score is None else score])
            if status != 0:
                logger.warning(f"Sweep cell {axis}={value} seed={seed} failed",
                               extra={'event': 'sweep_cell_failed', 'value': value, 'seed': seed})

    summary_path = os.path.join(root, "summary.csv")
    with open(summary_path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "mean", "std", "mean_pm_std", "n_ok", "n_failed"])
        for value in values:
            scores = [score for (v, _, _), (status, score) in zip(cells, outcomes)
                      if v == value and status == 0 and score is not None]
            failed = sum(1 for (v, _, _), (status, _) in zip(cells, outcomes) if v == value and status != 0)
            mean = float(np.mean(scores)) if scores else float("nan")
            std = float(np.std(scores)) if scores else float("nan")
            writer.writerow([axis, value, mean, std, f"{mean:.4f} ± {std:.4f}", len(scores), failed])
    logger.info(f"Sweep summary written to {summary_path}")
    return summary_path


# ===== Post-hoc tools =====

def _load_run(run_dir: str):
    cfg = env_config.Config(os.path.join(run_dir, CONFIG_COPY))
    experiment = ExperimentConfig.from_config(cfg)
    params, meta = load_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE))
    policy = unpack_policy(params, f"agent{int(meta.get('best_agent', 0))}")
    return experiment, policy, meta


def _run_dir_of(path: str) -> str:
    return path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))


def eval_checkpoint(path: str, episodes: int = 10, seed: int = 0) -> Optional[Dict[str, Any]]:
    """Roll out the stored (best) policy; reports mean true return and success rate."""
    try:
        experiment, policy, meta = _load_run(_run_dir_of(path))
        trajectories = collect_rollouts(experiment.env.factory(), policy, episodes, np.random.SeedSequence(seed))
        returns = [t.info['true_return'] for t in trajectories]
        report = {
            'episodes': episodes,
            'return_mean': float(np.mean(returns)),
            'return_std': float(np.std(returns)),
            'success_rate': float(np.mean([bool(t.info.get('success')) for t in trajectories])),
            'agent': int(meta.get('best_agent', 0)),
        }
        logger.info("Checkpoint evaluated", extra=report)
        return report
    except Exception as e:
        logger.error(f"Error evaluating checkpoint {path}: {e}")
        return None


def export_heatmap(run_dir: str, episodes: int = 10, seed: int = 0) -> Optional[str]:
    """Fresh rollouts of the stored policy binned into heatmap.csv."""
    try:
        experiment, policy, _ = _load_run(run_dir)
        trajectories = collect_rollouts(experiment.env.factory(), policy, episodes, np.random.SeedSequence(seed))
        grid = visitation_histogram(trajectories, experiment.heatmap_resolution)
        path = os.path.join(run_dir, "heatmap.csv")
        write_heatmap_csv(grid, path)
        logger.info(f"Heatmap exported to {path}")
        return path
    except Exception as e:
        logger.error(f"Error exporting heatmap for {run_dir}: {e}")
        return None


def _kernel_iteration(path: str) -> int:
    return int(os.path.basename(path)[len("kernel_"):-len(".csv")])


def export_kernel(run_dir: str) -> Optional[str]:
    """Collapse the per-iteration kernel CSVs into kernel_summary.csv (min/mean off-diagonal per iteration)."""
    try:
        files = sorted(glob.glob(os.path.join(run_dir, "kernel_[0-9]*.csv")), key=_kernel_iteration)
        if not files:
            logger.warning(f"No kernel matrices found in {run_dir}")
            return None
        path = os.path.join(run_dir, "kernel_summary.csv")
        with open(path, 'w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "n_agents", "min_offdiag", "mean_offdiag"])
            for name in files:
                kernel = np.atleast_2d(np.loadtxt(name, delimiter=","))
                iteration = _kernel_iteration(name)
                offdiag = off_diagonal(kernel)
                writer.writerow([iteration, len(kernel),
                                 float(offdiag.min()) if offdiag.size else "",
                                 float(offdiag.mean()) if offdiag.size else ""])
        logger.info(f"Kernel summary exported to {path}")
        return path
    except Exception as e:
        logger.error(f"Error exporting kernel for {run_dir}: {e}")
        return None
