"""Safe offline RL on the 2D boat: reachability critics, flow teacher, gated one-step actor
and conformal threshold calibration, written against plain numpy."""

from .actor import ActorConfig, OneStepActor, gated_actor_loss, train_actor
from .boat import TrajectoryDataset, generate_dataset, rollout
from .conformal import CalibrationConfig, CalibrationReport, calibrate_delta
from .config import RunConfig, load_config
from .critics import CriticBundle, CriticConfig, train_critics
from .flow import FlowConfig, FlowTeacher, train_flow_teacher

__version__ = "0.1.0"

__all__ = [
    "ActorConfig", "CalibrationConfig", "CalibrationReport", "CriticBundle", "CriticConfig",
    "FlowConfig", "FlowTeacher", "OneStepActor", "RunConfig", "TrajectoryDataset",
    "calibrate_delta", "gated_actor_loss", "generate_dataset", "load_config", "rollout",
    "train_actor", "train_critics", "train_flow_teacher",
]
