"""Phase orchestration, persistence, evaluation and latency benchmarks."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import actor as act
from . import boat, conformal, nn, oracle
from .config import RunConfig
from .critics import CriticBundle, init_critics, train_critics
from .flow import FlowTeacher, init_teacher, integrate_flow, train_flow_teacher

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ORDER = 3
EXIT_INFEASIBLE = 4


class OrderingError(RuntimeError):
    """A phase was requested before the artifacts of an earlier phase exist."""


@dataclass
class RunPaths:
    out: Path
    checkpoints: Path

    @classmethod
    def create(cls, out, checkpoint_dir=None) -> RunPaths:
        out = Path(out)
        ckpt = Path(checkpoint_dir) if checkpoint_dir else out / "checkpoints"
        return cls(out, ckpt)

    @property
    def dataset(self) -> Path:
        return self.out / "dataset.sfqd"

    @property
    def metrics(self) -> Path:
        return self.out / "metrics"

    @property
    def calibration(self) -> Path:
        return self.out / "calibration.json"

    def phase_dir(self, phase: str) -> Path:
        return self.checkpoints / phase

    def eval_report(self, mode: str) -> Path:
        return self.out / f"eval_{mode_slug(mode)}.json"


def mode_slug(mode: str) -> str:
    return mode.replace(":", "").replace("(", "").replace(")", "")


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, columns, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(columns)
        wr.writerows([[_fmt(v) for v in row] for row in rows])


def _append_csv(path: Path, columns, rows) -> None:
    if not path.exists():
        _write_csv(path, columns, rows)
        return
    with open(path, "a", newline="") as f:
        csv.writer(f).writerows([[_fmt(v) for v in row] for row in rows])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------- checkpoints

def save_networks(directory: Path, nets: dict[str, nn.ParamSet], header: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, params in nets.items():
        nn.save_params(params, directory / f"{name}.sfql")
    header = dict(header, networks={k: {"dims": list(p.spec.dims), "step": p.step}
                                    for k, p in nets.items()})
    _write_json(directory / "header.json", header)


def load_networks(directory: Path, phase: str) -> tuple[dict[str, nn.ParamSet], dict]:
    head = directory / "header.json"
    if not head.exists():
        raise OrderingError(f"phase '{phase}' has no checkpoint in {directory}; run it first")
    header = json.loads(head.read_text())
    nets = {}
    for name in header["networks"]:
        params = nn.load_params(directory / f"{name}.sfql")
        params.name = name
        nets[name] = params
    return nets, header


def save_critics(paths: RunPaths, bundle: CriticBundle, step: int) -> None:
    save_networks(paths.phase_dir("critics"), bundle.networks,
                  {"phase": "critics", "step": step, "gamma": bundle.gamma, "tau": bundle.tau,
                   "ema_rate": bundle.ema_rate, "backup": bundle.backup,
                   "next_value": bundle.next_value})


def load_critics(paths: RunPaths) -> tuple[CriticBundle, int]:
    nets, h = load_networks(paths.phase_dir("critics"), "critics")
    q_r = [nets[k] for k in sorted(nets) if k.startswith("q_r")]
    q_c = [nets[k] for k in sorted(nets) if k.startswith("q_c")]
    bundle = CriticBundle(q_r, nets["v_r"], q_c, nets["v_c"], h["gamma"], h["tau"], h["ema_rate"],
                          h["backup"], h["next_value"])
    return bundle, h["step"]


def save_teacher(paths: RunPaths, teacher: FlowTeacher, step: int) -> None:
    save_networks(paths.phase_dir("flow"), {"teacher": teacher.net},
                  {"phase": "flow", "step": step, "k_steps": teacher.k_steps})


def load_teacher(paths: RunPaths) -> tuple[FlowTeacher, int]:
    nets, h = load_networks(paths.phase_dir("flow"), "flow")
    return FlowTeacher(nets["teacher"], h["k_steps"]), h["step"]


def save_actor(paths: RunPaths, actor: act.OneStepActor, step: int, extra: dict | None = None):
    save_networks(paths.phase_dir("actor"), {"actor": actor.net},
                  {"phase": "actor", "step": step, "lam": actor.lam, "eta": actor.eta,
                   **(extra or {})})


def load_actor(paths: RunPaths) -> tuple[act.OneStepActor, int]:
    nets, h = load_networks(paths.phase_dir("actor"), "actor")
    return act.OneStepActor(nets["actor"], h["lam"], h["eta"]), h["step"]


def _try_load(loader, paths):
    try:
        return loader(paths)
    except OrderingError:
        return None, 0


# ---------------------------------------------------------------- phases

def cmd_gen_data(cfg: RunConfig, paths: RunPaths) -> Path:
    ds = boat.generate_dataset(cfg.env.n_traj, cfg.env.horizon, cfg.env.dt, cfg.env.seed)
    paths.out.mkdir(parents=True, exist_ok=True)
    boat.save_dataset(ds, paths.dataset)
    log.info("wrote %d transitions to %s", len(ds), paths.dataset)
    return paths.dataset


def _dataset(paths: RunPaths) -> boat.TrajectoryDataset:
    if not paths.dataset.exists():
        raise OrderingError(f"no dataset at {paths.dataset}; run gen-data first")
    return boat.load_dataset(paths.dataset)


def _chunks(start: int, stop: int, every: int):
    while start < stop:
        end = min(stop, (start // every + 1) * every)
        yield start, end
        start = end


def _checkpoint_every(section) -> int:
    # whole logging windows, so the metrics CSV is the same with or without restarts
    return max(section.log_every, 10 * section.log_every)


def train_critics_phase(cfg: RunConfig, paths: RunPaths) -> CriticBundle:
    ds = _dataset(paths)
    bundle, start = _try_load(load_critics, paths)
    if bundle is None:
        bundle = init_critics(cfg.critics)
        start = 0
    csv_path = paths.metrics / "critics.csv"
    if start == 0 and csv_path.exists():
        csv_path.unlink()
    for a, b in _chunks(start, cfg.critics.steps, _checkpoint_every(cfg.critics)):
        bundle, hist = train_critics(ds, dataclasses.replace(cfg.critics, steps=b), bundle,
                                     start_step=a)
        _append_csv(csv_path, hist.columns, hist.rows)
        save_critics(paths, bundle, b)
    if start >= cfg.critics.steps:
        log.info("critics already trained to step %d", start)
    save_critics(paths, bundle, max(start, cfg.critics.steps))
    return bundle


def train_flow_phase(cfg: RunConfig, paths: RunPaths) -> FlowTeacher:
    # the flow teacher only needs data, but the phase order is still enforced
    if not (paths.phase_dir("critics") / "header.json").exists():
        raise OrderingError("phase 'critics' must run before 'flow'")
    ds = _dataset(paths)
    teacher, start = _try_load(load_teacher, paths)
    csv_path = paths.metrics / "flow.csv"
    if start == 0 and csv_path.exists():
        csv_path.unlink()
    for a, b in _chunks(start, cfg.flow.steps, _checkpoint_every(cfg.flow)):
        teacher, hist = train_flow_teacher(ds, dataclasses.replace(cfg.flow, steps=b), teacher,
                                           start_step=a)
        _append_csv(csv_path, hist.columns, hist.rows)
        save_teacher(paths, teacher, b)
    if teacher is None:
        teacher = init_teacher(cfg.flow)
    save_teacher(paths, teacher, max(start, cfg.flow.steps))
    return teacher


def train_actor_phase(cfg: RunConfig, paths: RunPaths, check_exclusivity: bool = False):
    critics, _ = load_critics(paths)
    try:
        teacher, _ = load_teacher(paths)
    except OrderingError as exc:
        raise OrderingError("phase 'flow' must run before 'actor'") from exc
    ds = _dataset(paths)
    actor, start = _try_load(load_actor, paths)
    csv_path = paths.metrics / "actor.csv"
    if start == 0 and csv_path.exists():
        csv_path.unlink()
    # exclusivity counts carry over from earlier invocations of the same run
    extra = {"exclusivity_checked": 0, "exclusivity_violations": 0}
    if start:
        header = json.loads((paths.phase_dir("actor") / "header.json").read_text())
        extra = {k: header.get(k, 0) for k in extra}
    for a, b in _chunks(start, cfg.actor.steps, _checkpoint_every(cfg.actor)):
        actor, hist = act.train_actor(ds.states, critics, teacher,
                                      dataclasses.replace(cfg.actor, steps=b), actor,
                                      start_step=a, check_exclusivity=check_exclusivity)
        extra["exclusivity_checked"] += hist.exclusivity_checked
        extra["exclusivity_violations"] += hist.exclusivity_violations
        _append_csv(csv_path, hist.columns, hist.rows)
        save_actor(paths, actor, b, extra)
    if actor is None:
        actor = act.init_actor(cfg.actor)
    save_actor(paths, actor, max(start, cfg.actor.steps), extra)
    return actor, extra


def cmd_train(cfg: RunConfig, paths: RunPaths, phase: str, check_exclusivity: bool = False):
    if phase not in ("critics", "flow", "actor", "all"):
        raise ValueError(f"unknown phase {phase!r}")
    out = {}
    if phase in ("critics", "all"):
        out["critics"] = train_critics_phase(cfg, paths)
    if phase in ("flow", "all"):
        out["flow"] = train_flow_phase(cfg, paths)
    if phase in ("actor", "all"):
        out["actor"] = train_actor_phase(cfg, paths, check_exclusivity)[0]
    return out


# ---------------------------------------------------------------- calibration

def _policy_rng(seed: int, mode: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(mode.encode())])


def cmd_calibrate(cfg: RunConfig, paths: RunPaths) -> conformal.CalibrationReport:
    critics, _ = load_critics(paths)
    actor, _ = load_actor(paths)
    policy = act.actor_policy(actor, _policy_rng(cfg.calibration.seed, "calibration"))
    report = conformal.calibrate_delta(policy, critics.safety_v, cfg.calibration, dt=cfg.env.dt)
    report.save(paths.calibration)
    return report


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    mode: str
    n_episodes: int
    seed: int
    delta_star: float | None
    initial_states: list[list[float]]
    rewards: list[float]
    violations: list[int]
    max_safety: list[float]
    mean_reward: float = 0.0
    total_violations: int = 0
    safety_rate: float = 0.0
    latency_ms: float | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.rewards)
        self.mean_reward = float(np.mean(self.rewards)) if n else 0.0
        self.total_violations = int(np.sum(self.violations))
        self.safety_rate = 100.0 * float(np.mean(np.asarray(self.violations) == 0)) if n else 0.0

    def deterministic_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("latency_ms")
        return d


def _safety_v_or_none(paths: RunPaths):
    try:
        return load_critics(paths)[0]
    except OrderingError:
        return None


def eval_initial_states(cfg: RunConfig, paths: RunPaths, critics: CriticBundle | None = None):
    """Uniform over {V_c < delta*, l < 0} if a calibration exists, else over {l < 0}."""
    rng = np.random.default_rng(cfg.eval.seed)
    delta = None
    if paths.calibration.exists():
        delta = conformal.CalibrationReport.load(paths.calibration).delta_star
        critics = critics or load_critics(paths)[0]

    def score(x):
        ell = boat.safety_margin(x)
        if delta is None:
            return ell
        return np.where(ell < 0, critics.safety_v(x) - delta, 1.0)

    states, _ = conformal.sample_sublevel(score, 0.0, cfg.eval.n_episodes, rng)
    return states, delta


def make_policy(mode: str, cfg: RunConfig, paths: RunPaths, rng: np.random.Generator):
    if mode == "zero":
        return boat.zero_policy
    if mode == "random":
        return boat.random_policy(rng)
    if mode == "safefql":
        return act.actor_policy(load_actor(paths)[0], rng)
    if mode.startswith("rejection"):
        n = parse_rejection_n(mode)
        critics, _ = load_critics(paths)
        teacher, _ = load_teacher(paths)
        return act.rejection_policy(teacher, critics, n, 0.0, rng)
    raise ValueError(f"unknown eval mode {mode!r}")


def parse_rejection_n(mode: str) -> int:
    digits = "".join(ch for ch in mode[len("rejection"):] if ch.isdigit())
    if not digits:
        raise ValueError(f"rejection mode needs a candidate count, e.g. 'rejection:16', got {mode!r}")
    return int(digits)


def cmd_eval(cfg: RunConfig, paths: RunPaths, mode: str) -> EvalReport:
    critics = _safety_v_or_none(paths)
    x0, delta = eval_initial_states(cfg, paths, critics)
    policy = make_policy(mode, cfg, paths, _policy_rng(cfg.eval.seed, mode))
    t0 = time.perf_counter()
    traj = boat.rollout(policy, x0, cfg.env.horizon, cfg.env.dt)
    elapsed = time.perf_counter() - t0
    report = EvalReport(
        mode=mode, n_episodes=len(x0), seed=cfg.eval.seed, delta_star=delta,
        initial_states=x0.tolist(), rewards=traj.cumulative_reward.tolist(),
        violations=[int(v) for v in traj.violations], max_safety=traj.max_safety.tolist(),
        latency_ms=1e3 * elapsed / max(1, cfg.env.horizon))
    base = paths.eval_report(mode)
    _write_json(base, report.deterministic_dict())
    _write_json(base.with_suffix(".timing.json"),
                {"mode": mode, "batched_step_latency_ms": report.latency_ms,
                 "episodes_per_step": len(x0)})
    _write_csv(base.with_suffix(".csv"),
               ("episode", "x1", "x2", "cumulative_reward", "violations", "max_l"),
               [(i, *x0[i], report.rewards[i], report.violations[i], report.max_safety[i])
                for i in range(len(x0))])
    return report


# ---------------------------------------------------------------- benchmarks

def _median_latency(fn, calls: int, warmup: int = 50) -> float:
    for _ in range(warmup):
        fn()
    times = np.empty(calls)
    for i in range(calls):
        t = time.perf_counter_ns()
        fn()
        times[i] = time.perf_counter_ns() - t
    return float(np.median(times)) / 1e3


def cmd_bench(cfg: RunConfig, paths: RunPaths, calls: int | None = None) -> dict:
    """Per-action wall-clock medians (microseconds) for one state at a time."""
    calls = calls or cfg.eval.bench_calls
    actor, _ = load_actor(paths)
    teacher, _ = load_teacher(paths)
    critics, _ = load_critics(paths)
    rng = np.random.default_rng(cfg.eval.seed)
    x = boat.sample_states(rng, 1)[0]
    z = rng.standard_normal(teacher.action_dim)
    out = {"calls": calls, "k_steps": teacher.k_steps,
           "actor_hidden": list(actor.net.spec.hidden),
           "teacher_hidden": list(teacher.net.spec.hidden), "forwards": {}}
    with nn.counting_forwards() as counts:
        act.deploy_action(actor, x, rng)
    out["forwards"]["one_step"] = dict(counts)
    out["one_step_us"] = _median_latency(lambda: act.deploy_action(actor, x, rng), calls)
    with nn.counting_forwards() as counts:
        integrate_flow(teacher, x, z)
    out["forwards"]["flow"] = dict(counts)
    out["flow_us"] = _median_latency(lambda: integrate_flow(teacher, x, z), calls)
    out["rejection_us"] = {}
    for n in cfg.eval.rejection_n:
        with nn.counting_forwards() as counts:
            act.rejection_sampling_action(teacher, critics, x, n, rng=rng)
        out["forwards"][f"rejection_{n}"] = dict(counts)
        out["rejection_us"][str(n)] = _median_latency(
            lambda n=n: act.rejection_sampling_action(teacher, critics, x, n, rng=rng), calls)
    out["flow_over_one_step"] = out["flow_us"] / out["one_step_us"]
    ns = sorted(cfg.eval.rejection_n)
    if len(ns) > 1:
        out["rejection_ratio"] = {f"{n}/{ns[0]}": out["rejection_us"][str(n)] /
                                  out["rejection_us"][str(ns[0])] for n in ns[1:]}
    _write_json(paths.out / "bench.json", out)
    return out


# ---------------------------------------------------------------- oracle

def cmd_oracle(cfg: RunConfig, paths: RunPaths) -> dict:
    oc = cfg.oracle
    t0 = time.perf_counter()
    grid = oracle.value_iteration(oc.resolution, oc.n_directions, cfg.critics.gamma, cfg.env.dt,
                                  oc.tol, backup=cfg.critics.backup)
    elapsed = time.perf_counter() - t0
    paths.out.mkdir(parents=True, exist_ok=True)
    oracle.save_grid(grid, paths.out / "oracle.sfqg")
    result = {"iterations": grid.iterations, "final_residual": float(grid.residuals[-1]),
              "feasible_fraction": grid.feasible_fraction(), "backup": grid.backup,
              "runtime_s": elapsed}
    critics = _safety_v_or_none(paths)
    if critics is not None:
        rng = np.random.default_rng(oc.seed)
        x = boat.sample_states(rng, oc.n_probes)
        a = boat.sample_disk_action(rng, oc.n_probes)
        result["agreement"] = oracle.sign_agreement(grid, x, critics.safety_q(x, a), oc.band,
                                                    actions=a)
    _write_json(paths.out / "oracle_report.json", result)
    return result
