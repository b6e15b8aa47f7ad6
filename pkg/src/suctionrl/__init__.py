"""suctionrl: tabletop suction-grasping sandbox.

A self-contained stack for studying vision-based suction picking on a desk
scale: a deterministic 2.5-D scene simulator with sim/real suction-seal
rules, top-down heightmap perception with a height-discontinuity action mask,
a from-scratch pixel-wise Q-network trained by temporal-difference learning
with a center-weighted reward, and an evaluation harness that compares reward
and masking ablations across structured clutter environments.
"""

from .agent import (
    ReplayBuffer,
    RewardConfig,
    SpawnPlan,
    StepLog,
    TrainConfig,
    Transition,
    center_distance,
    replay_sample,
    reward,
    select_action,
    td_error,
    td_target,
    train,
)
from .config import RunConfig, digest, parse, preset, serialize
from .evalkit import EvalReport, MatrixSpec, evaluate, emit_report, rolling_rate, run_matrix
from .heightmap import (
    ClutterMap,
    Heightmap,
    PerceptionConfig,
    clutter_map,
    occupied_object_estimate,
    pixel_to_world,
    render_heightmaps,
    suction_height,
)
from .qnet import (
    ArchConfig,
    QMap,
    QNetworkParams,
    apply_update,
    backward_at_pixel,
    forward,
    init_params,
    load_params,
    save_params,
    snapshot_target,
)
from .scene import (
    Scene,
    SceneObject,
    SuctionGeometry,
    SuctionOutcome,
    execute_suction,
    reposition,
    scene_from_json,
    scene_to_json,
    spawn_environment,
    spawn_scattered,
    top_height_at,
)

__version__ = "0.1.0"
