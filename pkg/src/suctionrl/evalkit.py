"""Experiment harness: metrics, ablation matrix, report and figure emission.

Metrics per evaluation run: success rate (percent of attempts that removed an
object), distance rate (percent of attempts whose suction point landed within
15 mm of the contacted object's top-face center), and collision rate.  The
matrix runner trains one agent per (method, seed) and evaluates it in each
requested environment; reports aggregate to per-cell means and standard
deviations, a delimited table, per-run JSON and an SVG training-curve figure.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import agent as ag
from . import config as cfg_mod
from . import heightmap as hm
from . import qnet
from . import scene as sc
from .rng import derive_seed, substream

DISTANCE_THRESHOLD_M = 0.015

# Method registry: name -> (reward mode, height policy flag).
METHODS = {
    "proposed": ("shaped", True),
    "proposed_nopolicy": ("shaped", False),
    "visual_grasping": ("binary", True),
    "visual_grasping_nopolicy": ("binary", False),
}

AGGREGATE_HEADER = [
    "method",
    "env",
    "fidelity",
    "seeds",
    "s_r_mean",
    "s_r_std",
    "d_r_mean",
    "d_r_std",
    "collision_rate_mean",
    "collision_rate_std",
]


@dataclass
class EvalStepRecord:
    episode: int
    attempt: int
    action: tuple[int, int]
    psi: float | None
    success: bool
    collision: bool


@dataclass
class EvalReport:
    config_digest: str
    method: str
    env: str
    fidelity: str
    seed: int
    n_attempts: int
    n_success: int
    n_distance_hits: int
    n_collisions: int
    records: list[EvalStepRecord] = field(default_factory=list)
    train_records: list[ag.StepRecord] | None = None
    wall_seconds: float = 0.0

    @property
    def s_r(self) -> float:
        return 100.0 * self.n_success / self.n_attempts if self.n_attempts else 0.0

    @property
    def d_r(self) -> float:
        return 100.0 * self.n_distance_hits / self.n_attempts if self.n_attempts else 0.0

    @property
    def collision_rate(self) -> float:
        return 100.0 * self.n_collisions / self.n_attempts if self.n_attempts else 0.0


def evaluate(
    params,
    env_kind: str,
    fidelity: str,
    height_policy: bool,
    episodes: int,
    seed: int,
    plan: ag.SpawnPlan | None = None,
    percept: hm.PerceptionConfig | None = None,
    geometry: sc.SuctionGeometry = sc.DEFAULT_GEOMETRY,
    strict_distance: bool = False,
    attempts_factor: int = 2,
    config_digest: str = "",
    method: str = "",
) -> EvalReport:
    """Greedy rollouts of a frozen policy; counts attempts and outcomes.

    ``params`` is either QNetworkParams (greedy over the masked Q map) or a
    callable ``(scene, heightmap, mask) -> (row, col)`` fixture policy.  An
    episode ends when the scene empties or after ``attempts_factor`` times the
    initial object count of attempts.
    """
    if episodes <= 0:
        raise ValueError("episodes must be positive")
    plan = plan or ag.SpawnPlan()
    percept = percept or hm.PerceptionConfig()
    plan = replace(plan, env_kind=env_kind)

    scene_rng = substream(seed, "eval-scenes")
    start = time.perf_counter()
    records: list[EvalStepRecord] = []
    n_success = n_distance = n_collisions = 0

    for episode in range(episodes):
        scene = plan.spawn(derive_seed(scene_rng))
        budget = attempts_factor * len(scene)
        attempt = 0
        while len(scene) > 0 and attempt < budget:
            state = hm.render_heightmaps(scene, percept.resolution)
            mask = hm.action_mask(state, percept, height_policy)
            if callable(params):
                action = params(scene, state, mask)
            else:
                q_map = qnet.forward(params, state)
                action = ag.select_action(q_map, mask, epsilon=0.0)
            z = hm.suction_height(state, *action)
            wx, wy = hm.pixel_to_world(*action, state.meters_per_pixel)
            outcome, scene = sc.execute_suction(scene, wx, wy, z, fidelity, geometry)
            attempt += 1
            psi = outcome.center_distance
            hit = psi is not None and psi < DISTANCE_THRESHOLD_M
            if strict_distance:
                hit = hit and outcome.success
            n_success += outcome.success
            n_distance += hit
            n_collisions += outcome.collision
            records.append(
                EvalStepRecord(episode, attempt, action, psi, outcome.success, outcome.collision)
            )

    return EvalReport(
        config_digest=config_digest,
        method=method,
        env=env_kind,
        fidelity=fidelity,
        seed=seed,
        n_attempts=len(records),
        n_success=n_success,
        n_distance_hits=n_distance,
        n_collisions=n_collisions,
        records=records,
        wall_seconds=time.perf_counter() - start,
    )


def rolling_rate(log: ag.StepLog | list[ag.StepRecord], window: int, predicate: str = "success") -> np.ndarray:
    """Windowed percentage series over suction attempts (repositioning excluded).

    ``predicate`` is "success" or "distance" (suction point within 15 mm of
    the object center).  A window larger than the log collapses to a single
    value over all attempts.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    rows = log.attempts() if isinstance(log, ag.StepLog) else [r for r in log if r.attempted]
    if predicate == "success":
        hits = np.array([r.success for r in rows], dtype=float)
    elif predicate == "distance":
        hits = np.array(
            [r.psi is not None and r.psi < DISTANCE_THRESHOLD_M for r in rows], dtype=float
        )
    else:
        raise ValueError(f"unknown predicate {predicate!r}")
    n = hits.size
    if n == 0:
        return np.empty(0)
    if window > n:
        return np.array([100.0 * hits.mean()])
    kernel = np.ones(window) / window
    return 100.0 * np.convolve(hits, kernel, mode="valid")


# ---------------------------------------------------------------------------
# Experiment matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatrixSpec:
    name: str
    methods: tuple[str, ...]
    envs: tuple[str, ...]
    seeds: tuple[int, ...]
    base: cfg_mod.RunConfig
    eval_fidelity: str = "real"

    def cells(self) -> list[tuple[str, str]]:
        return [(m, e) for m in self.methods for e in self.envs]


def parse_matrix(text: str) -> MatrixSpec:
    """Matrix file: a [matrix] section plus optional RunConfig sections."""
    import configparser

    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    if not parser.has_section("matrix"):
        raise ValueError("matrix spec needs a [matrix] section")
    matrix = dict(parser.items("matrix"))
    known = {"name", "methods", "envs", "seeds", "eval_fidelity"}
    unknown = set(matrix) - known
    if unknown:
        raise ValueError(f"unknown matrix keys: {sorted(unknown)}")

    methods = tuple(v.strip() for v in matrix.get("methods", "").split(",") if v.strip())
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; valid: {', '.join(METHODS)}")
    envs = tuple(v.strip() for v in matrix.get("envs", "scattered").split(",") if v.strip())
    seeds = tuple(int(v.strip()) for v in matrix.get("seeds", "0").split(",") if v.strip())

    rest = io.StringIO()
    for section in parser.sections():
        if section == "matrix":
            continue
        rest.write(f"[{section}]\n")
        for key, value in parser.items(section):
            rest.write(f"{key} = {value}\n")
    base = cfg_mod.parse(rest.getvalue())
    return MatrixSpec(
        name=matrix.get("name", "matrix"),
        methods=methods,
        envs=envs,
        seeds=seeds,
        base=base,
        eval_fidelity=matrix.get("eval_fidelity", "real"),
    )


def _train_method(base: cfg_mod.RunConfig, method: str, seed: int):
    reward_mode, height_policy = METHODS[method]
    run = cfg_mod.with_seed(base, seed)
    run = replace(run, reward=replace(run.reward, mode=reward_mode), height_policy=height_policy)
    params, log = ag.train(
        run.train,
        plan=run.scene,
        percept=run.percept,
        arch=run.arch,
        reward_cfg=run.reward,
        height_policy=run.height_policy,
        fidelity=run.fidelity,
        geometry=run.geometry,
    )
    return run, params, log


def _run_cell_worker(args):
    base, method, env, seed, eval_fidelity = args
    run, params, log = _train_method(base, method, seed)
    _, height_policy = METHODS[method]
    report = evaluate(
        params,
        env,
        eval_fidelity,
        height_policy,
        run.eval.episodes,
        seed,
        plan=run.scene,
        percept=run.percept,
        geometry=run.geometry,
        strict_distance=run.eval.strict_distance,
        attempts_factor=run.eval.attempts_factor,
        config_digest=cfg_mod.digest(run),
        method=method,
    )
    report.train_records = log.rows
    return report


def run_matrix(spec: MatrixSpec, seeds: tuple[int, ...] | None = None, jobs: int = 1) -> list[EvalReport]:
    """Train and evaluate every (method, env, seed) cell of the matrix.

    Training is shared across environments of the same (method, seed) when
    running serially; with jobs > 1 cells run in separate processes.
    """
    seeds = tuple(seeds) if seeds is not None else spec.seeds
    reports: list[EvalReport] = []
    if jobs > 1:
        work = [
            (spec.base, method, env, seed, spec.eval_fidelity)
            for seed in seeds
            for (method, env) in spec.cells()
        ]
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_cell_worker, work))
    else:
        for seed in seeds:
            trained: dict[str, tuple] = {}
            for method in spec.methods:
                trained[method] = _train_method(spec.base, method, seed)
            for method, env in spec.cells():
                run, params, log = trained[method]
                _, height_policy = METHODS[method]
                report = evaluate(
                    params,
                    env,
                    spec.eval_fidelity,
                    height_policy,
                    run.eval.episodes,
                    seed,
                    plan=run.scene,
                    percept=run.percept,
                    geometry=run.geometry,
                    strict_distance=run.eval.strict_distance,
                    attempts_factor=run.eval.attempts_factor,
                    config_digest=cfg_mod.digest(run),
                    method=method,
                )
                report.train_records = log.rows
                reports.append(report)
    reports.sort(key=lambda r: (r.method, r.env, r.fidelity, r.seed))
    return reports


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def aggregate_rows(reports: list[EvalReport]) -> list[dict]:
    """Per-(method, env, fidelity) means and standard deviations over seeds."""
    groups: dict[tuple[str, str, str], list[EvalReport]] = {}
    for report in reports:
        groups.setdefault((report.method, report.env, report.fidelity), []).append(report)
    rows = []
    for (method, env, fidelity), members in sorted(groups.items()):
        s = np.array([m.s_r for m in members])
        d = np.array([m.d_r for m in members])
        c = np.array([m.collision_rate for m in members])
        rows.append(
            {
                "method": method,
                "env": env,
                "fidelity": fidelity,
                "seeds": len(members),
                "s_r_mean": s.mean(),
                "s_r_std": s.std(),
                "d_r_mean": d.mean(),
                "d_r_std": d.std(),
                "collision_rate_mean": c.mean(),
                "collision_rate_std": c.std(),
            }
        )
    return rows


def _aggregate_csv(reports: list[EvalReport]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(AGGREGATE_HEADER)
    for row in aggregate_rows(reports):
        writer.writerow([_csv_value(row[k]) for k in AGGREGATE_HEADER])
    return out.getvalue()


def _csv_value(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _report_json(report: EvalReport) -> str:
    doc = {
        "config_digest": report.config_digest,
        "method": report.method,
        "env": report.env,
        "fidelity": report.fidelity,
        "seed": report.seed,
        "counts": {
            "attempts": report.n_attempts,
            "successes": report.n_success,
            "distance_hits": report.n_distance_hits,
            "collisions": report.n_collisions,
        },
        "rates": {
            "s_r": report.s_r,
            "d_r": report.d_r,
            "collision_rate": report.collision_rate,
        },
        "records": [
            {
                "episode": r.episode,
                "attempt": r.attempt,
                "action": list(r.action),
                "psi_m": r.psi,
                "success": r.success,
                "collision": r.collision,
            }
            for r in report.records
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def _training_curves_svg(reports: list[EvalReport], path: Path, window: int = 50) -> None:
    """Fig-style rolling success/distance curves per method, rendered to SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "suctionrl"

    by_method: dict[str, list[list[ag.StepRecord]]] = {}
    for report in reports:
        if report.train_records:
            by_method.setdefault(report.method, []).append(report.train_records)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for method, logs in sorted(by_method.items()):
        # De-duplicate training logs shared across env cells of one seed.
        seen: list[list[ag.StepRecord]] = []
        for rows in logs:
            if not any(rows is s for s in seen):
                seen.append(rows)
        style = "--" if method.endswith("nopolicy") else "-"
        for ax, predicate, label in (
            (axes[0], "success", "success rate (%)"),
            (axes[1], "distance", "distance rate (%)"),
        ):
            series = [rolling_rate(rows, window, predicate) for rows in seen]
            shortest = min(len(s) for s in series)
            mean = np.mean([s[:shortest] for s in series], axis=0)
            ax.plot(np.arange(shortest), mean, style, label=method)
            ax.set_xlabel("suction attempt")
            ax.set_ylabel(label)
            ax.set_ylim(-2, 102)
    for ax in axes:
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_report(reports: list[EvalReport], out_dir) -> list[Path]:
    """Write aggregate CSV, one JSON per run, and the rolling-rate SVG chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    csv_path = out / "aggregate.csv"
    csv_path.write_text(_aggregate_csv(reports))
    written.append(csv_path)

    for report in reports:
        name = f"{report.method}_{report.env}_{report.fidelity}_{report.seed}.json"
        path = out / name
        path.write_text(_report_json(report))
        written.append(path)

    if any(r.train_records for r in reports):
        svg_path = out / "rolling_rates.svg"
        _training_curves_svg(reports, svg_path)
        written.append(svg_path)
    return written
