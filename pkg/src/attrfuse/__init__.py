"""Joint face recognition and attribute prediction with feature-level fusion."""

from .model import ArchConfig, FusionModel, Scenario
from .optim import GroupOptState, HyperParams, adamax_update, joint_step

__all__ = ["ArchConfig", "FusionModel", "GroupOptState", "HyperParams", "Scenario", "adamax_update", "joint_step"]
__version__ = "0.1.0"
