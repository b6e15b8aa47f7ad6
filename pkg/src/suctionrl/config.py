"""Run configuration: flat key = value sections, canonical round-trip, digest.

One RunConfig carries every knob of the stack with paper-style defaults.
Parsing rejects unknown sections or keys so config files cannot silently
drift; serialization is canonical, which makes the content digest a stable
provenance stamp for output files.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, replace

from . import scene as sc
from .agent import RewardConfig, SpawnPlan, TrainConfig
from .heightmap import PerceptionConfig
from .qnet import ArchConfig


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 5
    fidelity: str = "real"
    strict_distance: bool = False
    attempts_factor: int = 2


@dataclass(frozen=True)
class RunConfig:
    env: str = "scattered"
    fidelity: str = "sim"
    height_policy: bool = True
    seed: int = 0
    scene: SpawnPlan = field(default_factory=SpawnPlan)
    geometry: sc.SuctionGeometry = field(default_factory=sc.SuctionGeometry)
    percept: PerceptionConfig = field(default_factory=PerceptionConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in text.split(",") if v.strip())


# section -> key -> (getter from RunConfig, parser from string)
_SCHEMA = {
    "run": {
        "env": (lambda c: c.env, str),
        "fidelity": (lambda c: c.fidelity, str),
        "height_policy": (lambda c: c.height_policy, _bool),
        "seed": (lambda c: c.seed, int),
    },
    "scene": {
        "object_count": (lambda c: c.scene.object_count, int),
        "object_size": (lambda c: c.scene.object_size, float),
        "workspace_side": (lambda c: c.scene.workspace_side, float),
    },
    "suction": {
        "cup_radius": (lambda c: c.geometry.cup_radius, float),
        "body_radius": (lambda c: c.geometry.body_radius, float),
        "contact_tolerance": (lambda c: c.geometry.contact_tolerance, float),
        "descent_clearance": (lambda c: c.geometry.descent_clearance, float),
    },
    "perception": {
        "resolution": (lambda c: c.percept.resolution, int),
        "shift_pixels": (lambda c: c.percept.shift_pixels, int),
        "axis": (lambda c: c.percept.axis, str),
        "threshold": (lambda c: c.percept.threshold, float),
        "relative_threshold_fraction": (
            lambda c: c.percept.relative_threshold_fraction,
            float,
        ),
        "signed": (lambda c: c.percept.signed, _bool),
    },
    "network": {
        "channels": (lambda c: c.arch.channels, _int_tuple),
        "strides": (lambda c: c.arch.strides, _int_tuple),
        "kernel": (lambda c: c.arch.kernel, int),
        "bn_momentum": (lambda c: c.arch.bn_momentum, float),
        "bn_eps": (lambda c: c.arch.bn_eps, float),
        "head_init_scale": (lambda c: c.arch.head_init_scale, float),
    },
    "reward": {
        "mode": (lambda c: c.reward.mode, str),
        "gain": (lambda c: c.reward.gain, float),
        "delta": (lambda c: c.reward.delta, float),
    },
    "train": {
        "learning_rate": (lambda c: c.train.learning_rate, float),
        "discount": (lambda c: c.train.discount, float),
        "steps": (lambda c: c.train.steps, int),
        "empty_threshold": (lambda c: c.train.empty_threshold, int),
        "epsilon_start": (lambda c: c.train.epsilon_start, float),
        "epsilon_end": (lambda c: c.train.epsilon_end, float),
        "epsilon_decay_steps": (lambda c: c.train.epsilon_decay_steps, int),
        "target_sync_interval": (lambda c: c.train.target_sync_interval, int),
        "replay_minibatch": (lambda c: c.train.replay_minibatch, int),
        "replay_capacity": (lambda c: c.train.replay_capacity, int),
        "td_error_clip": (lambda c: c.train.td_error_clip, float),
    },
    "eval": {
        "episodes": (lambda c: c.eval.episodes, int),
        "fidelity": (lambda c: c.eval.fidelity, str),
        "strict_distance": (lambda c: c.eval.strict_distance, _bool),
        "attempts_factor": (lambda c: c.eval.attempts_factor, int),
    },
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: RunConfig) -> str:
    """Canonical text form: fixed section and key order."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (getter, _) in keys.items():
            lines.append(f"{key} = {_format_value(getter(config))}")
        lines.append("")
    return "\n".join(lines)


def _build(values: dict[str, dict[str, object]]) -> RunConfig:
    run = values["run"]
    scene_v = values["scene"]
    suction = values["suction"]
    percept = values["perception"]
    network = values["network"]
    reward_v = values["reward"]
    train_v = values["train"]
    eval_v = values["eval"]
    return RunConfig(
        env=run["env"],
        fidelity=run["fidelity"],
        height_policy=run["height_policy"],
        seed=run["seed"],
        scene=SpawnPlan(
            env_kind=run["env"],
            object_count=scene_v["object_count"],
            object_size=scene_v["object_size"],
            workspace_side=scene_v["workspace_side"],
        ),
        geometry=sc.SuctionGeometry(
            cup_radius=suction["cup_radius"],
            body_radius=suction["body_radius"],
            contact_tolerance=suction["contact_tolerance"],
            descent_clearance=suction["descent_clearance"],
        ),
        percept=PerceptionConfig(
            resolution=percept["resolution"],
            shift_pixels=percept["shift_pixels"],
            axis=percept["axis"],
            threshold=percept["threshold"],
            relative_threshold_fraction=percept["relative_threshold_fraction"],
            signed=percept["signed"],
        ),
        arch=ArchConfig(
            channels=network["channels"],
            strides=network["strides"],
            kernel=network["kernel"],
            bn_momentum=network["bn_momentum"],
            bn_eps=network["bn_eps"],
            head_init_scale=network["head_init_scale"],
        ),
        reward=RewardConfig(
            gain=reward_v["gain"], delta=reward_v["delta"], mode=reward_v["mode"]
        ),
        train=TrainConfig(
            learning_rate=train_v["learning_rate"],
            discount=train_v["discount"],
            steps=train_v["steps"],
            empty_threshold=train_v["empty_threshold"],
            epsilon_start=train_v["epsilon_start"],
            epsilon_end=train_v["epsilon_end"],
            epsilon_decay_steps=train_v["epsilon_decay_steps"],
            target_sync_interval=train_v["target_sync_interval"],
            replay_minibatch=train_v["replay_minibatch"],
            replay_capacity=train_v["replay_capacity"],
            td_error_clip=train_v["td_error_clip"],
            seed=run["seed"],
        ),
        eval=EvalConfig(
            episodes=eval_v["episodes"],
            fidelity=eval_v["fidelity"],
            strict_distance=eval_v["strict_distance"],
            attempts_factor=eval_v["attempts_factor"],
        ),
    )


def parse(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    defaults = RunConfig()
    values: dict[str, dict[str, object]] = {}
    for section, keys in _SCHEMA.items():
        values[section] = {key: getter(defaults) for key, (getter, _) in keys.items()}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ValueError(f"unknown config key {section}.{key}")
            values[section][key] = _SCHEMA[section][key][1](raw)
    return _build(values)


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply ``section.key=value`` overrides on top of an existing config."""
    values: dict[str, dict[str, object]] = {}
    for section, keys in _SCHEMA.items():
        values[section] = {key: getter(config) for key, (getter, _) in keys.items()}
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ValueError(f"override must look like section.key=value, got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ValueError(f"unknown config key {dotted}")
        values[section][key] = _SCHEMA[section][key][1](raw)
    return _build(values)


def digest(config: RunConfig) -> str:
    """Content hash of the canonical serialization (provenance stamp)."""
    return hashlib.sha256(serialize(config).encode("utf-8")).hexdigest()[:16]


def diff(a: RunConfig, b: RunConfig) -> list[str]:
    """Dotted names of keys whose values differ between two configs."""
    out = []
    for section, keys in _SCHEMA.items():
        for key, (getter, _) in keys.items():
            if getter(a) != getter(b):
                out.append(f"{section}.{key}")
    return out


def preset(name: str) -> RunConfig:
    """Named configurations.

    ``paper-proposed`` is the shaped-reward, height-policy-on configuration
    with the published constants; ``paper-baseline`` differs only in its
    binary reward.  ``desk-small`` shrinks resolution and network width for
    fast CPU runs with the same structure.
    """
    base = RunConfig()
    if name == "paper-proposed":
        return base
    if name == "paper-baseline":
        return replace(base, reward=RewardConfig(mode="binary"))
    if name in ("desk-small", "desk-small-baseline"):
        small = replace(
            base,
            percept=PerceptionConfig(resolution=112, shift_pixels=30),
            arch=ArchConfig(channels=(16, 32, 32, 32), strides=(2, 2, 1, 1)),
        )
        if name == "desk-small-baseline":
            return replace(small, reward=RewardConfig(mode="binary"))
        return small
    raise ValueError(
        f"unknown preset {name!r}; valid: paper-proposed, paper-baseline, desk-small, desk-small-baseline"
    )


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    return replace(config, seed=seed, train=replace(config.train, seed=seed))


def with_env(config: RunConfig, env: str) -> RunConfig:
    return replace(config, env=env, scene=replace(config.scene, env_kind=env))
