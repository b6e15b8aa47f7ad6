"""Learning core: reward, action selection, replay, TD updates, training loop.

The loop alternates suction attempts with (when the workspace empties)
repositioning.  Learning starts at step 3 and always concerns the previous
step's action: its realized reward plus the discounted masked maximum of the
target network on the current state form the bootstrap target.  Each learning
step also replays a small minibatch from the FIFO buffer and applies a single
plain gradient-descent update for the summed pixel losses.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import heightmap as hm
from . import qnet
from . import scene as sc
from .rng import derive_seed, substream

STEP_LOG_HEADER = [
    "step",
    "action_px",
    "action_py",
    "psi_m",
    "success",
    "collision",
    "reward",
    "td_error",
    "buffer_len",
    "epsilon",
]


class EmptyBufferError(RuntimeError):
    """Sampling from an empty replay buffer."""


@dataclass(frozen=True)
class RewardConfig:
    """Center-weighted ("shaped") or plain binary reward."""

    gain: float = 15.0  # numerator of the shaped reward
    delta: float = 1e-5  # zero-division guard added to the center distance
    mode: str = "shaped"

    def __post_init__(self):
        if self.gain <= 0 or self.delta <= 0:
            raise ValueError("gain and delta must be positive")
        if self.mode not in ("shaped", "binary"):
            raise ValueError(f"unknown reward mode {self.mode!r}")


def center_distance(action_world: tuple[float, float], object_center: tuple[float, float]) -> float:
    """Euclidean distance in meters between suction point and object center."""
    return math.hypot(action_world[0] - object_center[0], action_world[1] - object_center[1])


def reward(cfg: RewardConfig, psi: float, success: bool) -> float:
    """Reward for one suction outcome.

    Shaped mode pays gain / (psi + delta) on success, so a dead-center hit is
    worth orders of magnitude more than an edge catch; binary mode pays 1.
    Failures always pay 0.
    """
    if psi < 0:
        raise ValueError("center distance must be non-negative")
    if not success:
        return 0.0
    if cfg.mode == "binary":
        return 1.0
    return cfg.gain / (psi + cfg.delta)


def _masked_indices(mask: np.ndarray) -> np.ndarray:
    """Flat indices the mask allows; falls back to all pixels on an empty mask."""
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        idx = np.arange(mask.size)
    return idx


def select_action(
    qmap: qnet.QMap | np.ndarray,
    clutter: hm.ClutterMap | np.ndarray,
    epsilon: float,
    rng: np.random.Generator | None = None,
) -> tuple[int, int]:
    """Pick a pixel: argmax of the masked Q map, or a random masked pixel.

    Masked-out pixels are never selected while the mask is non-empty; an
    all-zero mask is replaced by all-ones for this one decision.  Ties break
    toward the lowest row-major index.
    """
    q = qmap.values if isinstance(qmap, qnet.QMap) else np.asarray(qmap)
    mask = clutter.mask if isinstance(clutter, hm.ClutterMap) else np.asarray(clutter)
    if q.shape != mask.shape:
        raise hm.ShapeMismatchError(f"shape mismatch: {q.shape} vs {mask.shape}")
    idx = _masked_indices(mask)
    if epsilon > 0:
        if rng is None:
            raise ValueError("epsilon-greedy selection needs a generator")
        if rng.random() < epsilon:
            flat = int(idx[rng.integers(0, idx.size)])
            return flat // q.shape[1], flat % q.shape[1]
    flat = int(idx[int(np.argmax(q.ravel()[idx]))])
    return flat // q.shape[1], flat % q.shape[1]


def masked_max(qmap: qnet.QMap | np.ndarray, clutter: hm.ClutterMap | np.ndarray) -> float:
    q = qmap.values if isinstance(qmap, qnet.QMap) else np.asarray(qmap)
    mask = clutter.mask if isinstance(clutter, hm.ClutterMap) else np.asarray(clutter)
    if q.shape != mask.shape:
        raise hm.ShapeMismatchError(f"shape mismatch: {q.shape} vs {mask.shape}")
    return float(q.ravel()[_masked_indices(mask)].max())


def td_target(
    reward_t: float,
    gamma: float,
    target_params: qnet.QNetworkParams,
    next_state: hm.Heightmap | None,
    next_clutter: hm.ClutterMap | None,
    terminal: bool = False,
) -> float:
    """Bootstrap target: reward plus the discounted masked max of the target net."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if terminal or gamma == 0.0:
        return reward_t
    q_next = qnet.forward(target_params, next_state)
    return reward_t + gamma * masked_max(q_next, next_clutter)


def td_error(q_value: float, target: float) -> float:
    return q_value - target


@dataclass(frozen=True)
class Transition:
    state: hm.Heightmap
    action: tuple[int, int]  # (row, col)
    world_point: tuple[float, float, float]
    outcome: sc.SuctionOutcome
    reward: float
    next_state: hm.Heightmap
    terminal: bool


class ReplayBuffer:
    """FIFO transition store with strict oldest-first eviction."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: deque[Transition] = deque(maxlen=capacity)

    def add(self, transition: Transition) -> None:
        self._entries.append(transition)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, i: int) -> Transition:
        return self._entries[i]

    def sample(self, k: int, rng: np.random.Generator) -> list[Transition]:
        if not self._entries:
            raise EmptyBufferError("empty buffer")
        idx = rng.integers(0, len(self._entries), size=k)
        return [self._entries[int(i)] for i in idx]


def replay_sample(buffer: ReplayBuffer, k: int, rng: np.random.Generator) -> list[Transition]:
    """Uniform sample with replacement (deterministic under a seeded rng)."""
    return buffer.sample(k, rng)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    discount: float = 0.5
    steps: int = 400
    empty_threshold: int = 1
    epsilon_start: float = 0.5
    epsilon_end: float = 0.1
    epsilon_decay_steps: int = 200
    target_sync_interval: int = 10
    replay_minibatch: int = 4
    replay_capacity: int = 400
    # Cap on the TD error magnitude fed to the gradient (the log keeps the raw
    # value).  The center-weighted reward spans several orders of magnitude;
    # unbounded quadratic-loss steps at those scales destabilize plain SGD.
    td_error_clip: float = 1e4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.steps <= 0:
            raise ValueError("steps must be positive")

    def epsilon_at(self, step: int) -> float:
        frac = min(1.0, max(0.0, (step - 1) / max(1, self.epsilon_decay_steps)))
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


@dataclass(frozen=True)
class SpawnPlan:
    """What to drop on the table for training (and how)."""

    env_kind: str = "scattered"  # or one of scene.ENV_KINDS
    object_count: int = 8
    object_size: float = 0.05
    workspace_side: float = sc.DEFAULT_WORKSPACE_SIDE

    def spawn(self, seed: int) -> sc.Scene:
        if self.env_kind == "scattered":
            return sc.spawn_scattered(
                self.object_count, self.object_size, seed, workspace_side=self.workspace_side
            )
        return sc.spawn_environment(
            self.env_kind, seed, workspace_side=self.workspace_side, size=self.object_size
        )


@dataclass
class StepRecord:
    step: int
    action: tuple[int, int] | None  # None on repositioning steps
    psi: float | None
    success: bool
    collision: bool
    reward: float
    td_error: float | None
    buffer_len: int
    epsilon: float

    @property
    def attempted(self) -> bool:
        return self.action is not None


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class StepLog:
    rows: list[StepRecord] = field(default_factory=list)

    def append(self, row: StepRecord) -> None:
        self.rows.append(row)

    def attempts(self) -> list[StepRecord]:
        return [r for r in self.rows if r.attempted]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(STEP_LOG_HEADER)
        for r in self.rows:
            row, col = r.action if r.action is not None else (None, None)
            writer.writerow(
                [
                    r.step,
                    _fmt(row),
                    _fmt(col),
                    _fmt(r.psi),
                    _fmt(r.success),
                    _fmt(r.collision),
                    _fmt(r.reward),
                    _fmt(r.td_error),
                    r.buffer_len,
                    _fmt(r.epsilon),
                ]
            )
        return out.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @staticmethod
    def from_csv(text: str) -> "StepLog":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != STEP_LOG_HEADER:
            raise ValueError("unexpected step-log header")
        log = StepLog()
        for raw in reader:
            action = (int(raw[1]), int(raw[2])) if raw[1] != "" else None
            log.append(
                StepRecord(
                    step=int(raw[0]),
                    action=action,
                    psi=float(raw[3]) if raw[3] != "" else None,
                    success=bool(int(raw[4])) if raw[4] != "" else False,
                    collision=bool(int(raw[5])) if raw[5] != "" else False,
                    reward=float(raw[6]) if raw[6] != "" else 0.0,
                    td_error=float(raw[7]) if raw[7] != "" else None,
                    buffer_len=int(raw[8]),
                    epsilon=float(raw[9]),
                )
            )
        return log


def _transition_loss_grads(
    params: qnet.QNetworkParams,
    target_params: qnet.QNetworkParams,
    transition: Transition,
    gamma: float,
    percept: hm.PerceptionConfig,
    height_policy: bool,
    td_error_clip: float,
) -> tuple[qnet.GradientSet, float]:
    next_mask = hm.action_mask(transition.next_state, percept, height_policy)
    y = td_target(
        transition.reward, gamma, target_params, transition.next_state, next_mask,
        terminal=transition.terminal,
    )
    q, cache = qnet._forward_full(params, transition.state, training=True)
    xi = td_error(float(q[transition.action]), y)
    clipped = float(np.clip(xi, -td_error_clip, td_error_clip))
    grads = qnet._backprop(params, q, cache, transition.action, clipped)
    return grads, xi


def train(
    cfg: TrainConfig,
    plan: SpawnPlan | None = None,
    percept: hm.PerceptionConfig | None = None,
    arch: qnet.ArchConfig | None = None,
    reward_cfg: RewardConfig | None = None,
    height_policy: bool = True,
    fidelity: str = "sim",
    geometry: sc.SuctionGeometry = sc.DEFAULT_GEOMETRY,
) -> tuple[qnet.QNetworkParams, StepLog]:
    """Run the full training loop for ``cfg.steps`` steps.

    Deterministic given ``cfg.seed``: scenes, initialization, exploration and
    replay each draw from a named substream of the one seed, so runs that
    differ only in reward mode or masking share identical scene sequences.
    """
    plan = plan or SpawnPlan()
    percept = percept or hm.PerceptionConfig()
    arch = arch or qnet.ArchConfig()
    reward_cfg = reward_cfg or RewardConfig()

    scene_rng = substream(cfg.seed, "scene")
    explore_rng = substream(cfg.seed, "explore")
    replay_rng = substream(cfg.seed, "replay")

    params = qnet.init_params(arch, derive_seed(substream(cfg.seed, "init")))
    target = qnet.snapshot_target(params)
    buffer = ReplayBuffer(cfg.replay_capacity)
    log = StepLog()

    scene = plan.spawn(derive_seed(scene_rng))
    state = hm.render_heightmaps(scene, percept.resolution)
    prev: Transition | None = None

    for step in range(1, cfg.steps + 1):
        epsilon = cfg.epsilon_at(step)
        if len(scene) < cfg.empty_threshold:
            scene = sc.reposition(
                scene,
                plan.object_count,
                derive_seed(scene_rng),
                kind=None if plan.env_kind == "scattered" else plan.env_kind,
                size=plan.object_size,
            )
            state = hm.render_heightmaps(scene, percept.resolution)
            prev = None
            log.append(StepRecord(step, None, None, False, False, 0.0, None, len(buffer), epsilon))
            continue

        mask = hm.action_mask(state, percept, height_policy)
        q_map = qnet.forward(params, state)
        action = select_action(q_map, mask, epsilon, explore_rng)
        z = hm.suction_height(state, *action)
        wx, wy = hm.pixel_to_world(*action, state.meters_per_pixel)
        outcome, next_scene = sc.execute_suction(scene, wx, wy, z, fidelity, geometry)
        r = reward(reward_cfg, outcome.center_distance or 0.0, outcome.success)
        next_state = (
            state if next_scene is scene else hm.render_heightmaps(next_scene, percept.resolution)
        )
        transition = Transition(
            state=state,
            action=action,
            world_point=(wx, wy, z),
            outcome=outcome,
            reward=r,
            next_state=next_state,
            terminal=len(next_scene) < cfg.empty_threshold,
        )

        xi_logged: float | None = None
        if step > 2 and prev is not None:
            total_grads: qnet.GradientSet = {}
            grads, xi_logged = _transition_loss_grads(
                params, target, prev, cfg.discount, percept, height_policy, cfg.td_error_clip
            )
            for name, g in grads.items():
                total_grads[name] = g
            for replayed in replay_sample(buffer, cfg.replay_minibatch, replay_rng):
                grads, _ = _transition_loss_grads(
                    params, target, replayed, cfg.discount, percept, height_policy,
                    cfg.td_error_clip,
                )
                for name, g in grads.items():
                    total_grads[name] = total_grads[name] + g if name in total_grads else g
            params = qnet.apply_update(params, total_grads, cfg.learning_rate)
            params = qnet.update_running_stats(params, state)

        buffer.add(transition)
        log.append(
            StepRecord(
                step,
                action,
                outcome.center_distance,
                outcome.success,
                outcome.collision,
                r,
                xi_logged,
                len(buffer),
                epsilon,
            )
        )
        prev = transition
        scene = next_scene
        state = next_state

        if step % cfg.target_sync_interval == 0:
            target = qnet.snapshot_target(params)

    return params, log
