"""Experiment orchestration: agent x seed grids, regret/cost/coverage records, result files."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from . import __version__
from .agents import AgentKind, RegretMeter, make_agent, run_episode
from .core import MnlMdp, compute_kappa_star, estimate_kappa, instance_digest, to_dict
from .envs import make_instance

CSV_COLUMNS = ("agent", "seed", "k", "cum_regret", "theta_err", "op_count", "stored_samples", "wall_ns")
KAPPA_SAMPLES = 1000


@dataclass
class ExperimentConfig:
    instance: dict = field(default_factory=lambda: {"generator": "random", "params": {
        "d": 3, "H": 2, "states_per_stage": 4, "A": 3, "U": 3, "B": 1.0, "seed": 0}})
    agents: list = field(default_factory=lambda: ["baseline", "ll", "ol"])
    K: int = 1000
    seeds: list = field(default_factory=lambda: [0])
    delta: float = 0.05
    out_dir: Optional[str] = None
    cadence: Optional[int] = None
    preset: str = "theory"
    radius_scale: Optional[float] = None
    history: str = "samples"
    workers: int = 1
    timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.cadence is not None and int(self.cadence) < 1:
            raise ValueError("cadence must be >= 1")
        if int(self.workers) < 1:
            raise ValueError("workers must be >= 1")
        names = [k.name for k in self.agent_kinds()]
        if len(set(names)) != len(names):
            raise ValueError("agent names must be distinct")
        return self

    @property
    def every(self) -> int:
        return int(self.cadence) if self.cadence else max(1, self.K // 1000)

    def agent_kinds(self) -> list:
        defaults = {"delta": self.delta, "preset": self.preset, "history": self.history}
        if self.radius_scale is not None:
            defaults["radius_scale"] = self.radius_scale
        return [AgentKind.from_any(a, **defaults) for a in self.agents]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RegretRecord:
    agent: str
    seed: int
    k: int
    cum_regret: float
    theta_err: float
    op_count: int
    stored_samples: int
    wall_ns: int

    def row(self) -> list:
        return [self.agent, self.seed, self.k, repr(float(self.cum_regret)),
                repr(float(self.theta_err)), self.op_count, self.stored_samples, self.wall_ns]


@dataclass
class RunResult:
    agent: str
    seed: int
    records: list
    error: Optional[str] = None
    path: Optional[str] = None


@dataclass
class ExperimentResult:
    runs: list
    manifest: dict

    def records(self, agent: str = None) -> list:
        return [r for run in self.runs if agent in (None, run.agent) for r in run.records]

    @property
    def errors(self) -> list:
        return [(r.agent, r.seed, r.error) for r in self.runs if r.error]


# ---------------------------------------------------------------- single runs

def noise_stream(seed: int, K: int, H: int) -> np.ndarray:
    """Per-seed uniforms for environment transitions, shared by every agent (common random numbers)."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0])).random((K, H))


def agent_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


def run_single(mdp: MnlMdp, kind: AgentKind, seed: int, K: int, every: int = 1,
               timing: bool = False, kappa: Optional[float] = None, on_episode=None,
               noise: Optional[np.ndarray] = None) -> list:
    """Run ``K`` episodes and return the checkpoint records.

    ``on_episode(k, agent, traj, metrics, policy)`` is called after every
    episode if given (used by coverage and property tests).
    """
    noise = noise_stream(seed, K, mdp.H) if noise is None else noise
    agent = make_agent(mdp, kind, agent_rng(seed), kappa)
    meter = RegretMeter(mdp)
    cum = 0.0
    out = []
    for k in range(1, K + 1):
        traj, m, policy = run_episode(agent, mdp, k, noise[k - 1], timing=timing,
                                       probs=meter.probs)
        cum += meter.increment(policy)
        if on_episode is not None:
            on_episode(k, agent, traj, m, policy)
        if k % every == 0 or k == K:
            out.append(RegretRecord(kind.name, seed, k, cum, float(np.mean(m.theta_err)),
                                    m.op_count, m.stored_samples, m.wall_ns if timing else 0))
    return out


def records_to_csv(records: Sequence[RegretRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_csv(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"{path}: header does not match {CSV_COLUMNS}")
    return [RegretRecord(r[0], int(r[1]), int(r[2]), float(r[3]), float(r[4]), int(r[5]),
                         int(r[6]), int(r[7])) for r in rows[1:]]


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_job(args):
    mdp, kind, seed, K, every, timing, kappa, out_dir = args
    try:
        recs = run_single(mdp, kind, seed, K, every, timing, kappa)
    except Exception as exc:  # recorded per run; other runs proceed
        return RunResult(kind.name, seed, [], f"{type(exc).__name__}: {exc}")
    path = None
    if out_dir is not None:
        path = str(Path(out_dir) / "runs" / f"{kind.name}_seed{seed}.csv")
        atomic_write(path, records_to_csv(recs))
    return RunResult(kind.name, seed, recs, None, path)


def build_manifest(config: ExperimentConfig, mdp: MnlMdp) -> dict:
    return {
        "version": __version__,
        "config": config.to_dict(),
        "instance_sha256": instance_digest(mdp),
        "kappa_hat": estimate_kappa(mdp, KAPPA_SAMPLES, np.random.default_rng(0)),
        "kappa_star": compute_kappa_star(mdp),
        "U": mdp.U,
        "B": mdp.B,
        "d": mdp.d,
        "H": mdp.H,
    }


def run_experiment(config: ExperimentConfig, mdp: Optional[MnlMdp] = None) -> ExperimentResult:
    """Run every (agent, seed) pair; write one CSV per run plus ``manifest.json`` when ``out_dir`` is set."""
    config.validate()
    mdp = make_instance(config.instance) if mdp is None else mdp
    kappa = estimate_kappa(mdp, KAPPA_SAMPLES, np.random.default_rng(0), include_theta_star=False)
    jobs = [(mdp, kind, seed, int(config.K), config.every, config.timing, kappa, config.out_dir)
            for kind in config.agent_kinds() for seed in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        runs = [_run_job(j) for j in jobs]
    manifest = build_manifest(config, mdp)
    manifest["errors"] = [{"agent": r.agent, "seed": r.seed, "error": r.error} for r in runs if r.error]
    if config.out_dir is not None:
        atomic_write(Path(config.out_dir) / "manifest.json",
                     json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        atomic_write(Path(config.out_dir) / "instance.json",
                     json.dumps(to_dict(mdp), sort_keys=True, separators=(",", ":")) + "\n")
    return ExperimentResult(runs, manifest)


def load_results(out_dir) -> list:
    return [r for p in sorted(Path(out_dir).glob("runs/*.csv")) for r in read_csv(p)]


# ---------------------------------------------------------------- coverage

def wilson_interval(hits: int, n: int, level: float = 0.95) -> tuple:
    ci = binomtest(hits, n).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class CoverageReport:
    delta: float
    n_runs: int
    checkpoints: list
    hits: dict  # agent -> list of hit counts per checkpoint

    def frequency(self, agent: str) -> list:
        return [h / self.n_runs for h in self.hits[agent]]

    def passes(self, slack: float = 0.05) -> bool:
        target = 1.0 - self.delta - slack
        return all(f >= target for a in self.hits for f in self.frequency(a))

    def lines(self) -> list:
        out = []
        for a, hs in self.hits.items():
            for k, h in zip(self.checkpoints, hs):
                lo, hi = wilson_interval(h, self.n_runs)
                out.append(f"{a} k={k}: coverage {h}/{self.n_runs} = {h / self.n_runs:.3f} "
                           f"(95% Wilson [{lo:.3f}, {hi:.3f}], target {1 - self.delta:.3f})")
        return out


def coverage_experiment(mdp: MnlMdp, n_runs: int, K: int, delta: float,
                        agents: Sequence = ("ll", "ol"), radius_scale: Optional[float] = None,
                        preset: str = "theory", history: str = "counts",
                        first_seed: int = 0) -> CoverageReport:
    """Fraction of runs with ``theta*_h`` inside the agent's set for every ``h`` at ``K/4, K/2, K``."""
    checkpoints = sorted({max(1, K // 4), max(1, K // 2), K})
    defaults = {"delta": delta, "preset": preset, "history": history}
    if radius_scale is not None:
        defaults["radius_scale"] = radius_scale
    kinds = [AgentKind.from_any(a, **defaults) for a in agents]
    hits = {k.name: [0] * len(checkpoints) for k in kinds}
    theta_star = mdp.theta_star
    for kind in kinds:
        for seed in range(first_seed, first_seed + n_runs):
            def check(k, agent, traj, m, policy, name=kind.name):
                if k in checkpoints:
                    sets = agent.confidence_sets()
                    if all(e.contains(theta_star[h]) for h, e in enumerate(sets)):
                        hits[name][checkpoints.index(k)] += 1
            run_single(mdp, kind, seed, K, every=K, on_episode=check)
    return CoverageReport(delta, n_runs, checkpoints, hits)


# ---------------------------------------------------------------- scaling

def fit_exponent(ks, regs) -> float:
    ks, regs = np.asarray(ks, dtype=float), np.asarray(regs, dtype=float)
    if len(regs) >= 2 and np.all(regs <= 0):
        return 0.0  # no regret at all is a flat curve
    ok = (ks > 0) & (regs > 0)
    if ok.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(ks[ok]), np.log(regs[ok]), 1)
    return float(slope)


def _nearest(ks: np.ndarray, target: float) -> int:
    return int(np.argmin(np.abs(ks - target)))


def scaling_report(records: Sequence[RegretRecord], window: float = 0.1) -> dict:
    """Per agent: seed-mean regret curve, ``Reg(K)/Reg(K/4)`` and the log-log exponent over ``k >= window K``."""
    by_agent: dict = {}
    for r in records:
        by_agent.setdefault(r.agent, {}).setdefault(r.k, []).append(r.cum_regret)
    out = {}
    for agent, curve in sorted(by_agent.items()):
        ks = np.array(sorted(curve))
        regs = np.array([np.mean(curve[k]) for k in ks])
        K = ks[-1]
        i4 = _nearest(ks, K / 4)
        ratio = float(regs[-1] / regs[i4]) if regs[i4] > 0 and i4 != len(ks) - 1 else float("nan")
        sel = ks >= window * K
        out[agent] = {
            "K": int(K),
            "final_regret": float(regs[-1]),
            "ratio_K_over_quarter": ratio,
            "alpha": fit_exponent(ks[sel], regs[sel]),
            "n_seeds": len(curve[K]),
        }
    return out


# ---------------------------------------------------------------- cost benchmark

@dataclass
class BenchReport:
    K: int
    slopes: dict  # agent -> {"op_count": slope, "stored_floats": slope, ...}
    constant: dict  # agent -> {"op_count": bool, ...}
    wall_ns_mean: dict

    def passes(self) -> bool:
        ol_ok = all(self.constant["ol"].values())
        ll_ok = self.slopes["ll"]["op_count"] > 0 and self.slopes["ll"]["stored_floats"] > 0
        return bool(ol_ok and ll_ok)

    def lines(self) -> list:
        out = [f"per-episode cost over K = {self.K}"]
        for a in self.slopes:
            parts = ", ".join(f"{c} slope {s:.6g}{' (exactly constant)' if self.constant[a][c] else ''}"
                              for c, s in self.slopes[a].items())
            out.append(f"{a}: {parts}; mean wall {self.wall_ns_mean[a] / 1e3:.1f} us")
        return out


COST_COLUMNS = ("op_count", "stored_floats", "stored_samples")


def bench(mdp: MnlMdp, K: int, seed: int = 0, delta: float = 0.05, preset: str = "theory") -> BenchReport:
    """Fit per-episode cost counters against ``k`` for LL (full history) and OL."""
    slopes, constant, wall = {}, {}, {}
    ks = np.arange(1, K + 1, dtype=float)
    for name in ("ll", "ol"):
        kind = AgentKind(name, delta=delta, preset=preset, history="samples")
        rows = {c: np.zeros(K) for c in COST_COLUMNS}
        walls = np.zeros(K)

        def grab(k, agent, traj, m, policy):
            rows["op_count"][k - 1] = m.op_count
            rows["stored_floats"][k - 1] = m.stored_floats
            rows["stored_samples"][k - 1] = m.stored_samples
            walls[k - 1] = m.wall_ns

        run_single(mdp, kind, seed, K, every=K, timing=True, on_episode=grab)
        constant[name] = {c: bool(np.all(v == v[0])) for c, v in rows.items()}
        # a constant series has slope 0; polyfit would return rounding noise
        slopes[name] = {c: 0.0 if constant[name][c] or K < 2 else float(np.polyfit(ks, v, 1)[0])
                        for c, v in rows.items()}
        wall[name] = float(walls.mean())
    return BenchReport(K, slopes, constant, wall)
