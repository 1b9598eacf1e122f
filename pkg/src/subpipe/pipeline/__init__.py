"""Stages, transport, bandwidth shaping and the GPipe scheduler."""

from .reference import ReferenceTrainer
from .runtime import Pipeline, StepReport, TrainPlan, build_pipeline, gather_params
from .shaper import ShaperConfig, VirtualClock
from .stage import Mode

__all__ = ["Mode", "Pipeline", "ReferenceTrainer", "ShaperConfig", "StepReport", "TrainPlan",
           "VirtualClock", "build_pipeline", "gather_params"]
