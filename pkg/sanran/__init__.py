"""Sanran: co-trained scattering-center / image fusion under label noise."""

from sanran.config import ExperimentConfig, load_experiment
from sanran.cotrain import CoTrainer
from sanran.log import RunLogger

__all__ = ["CoTrainer", "ExperimentConfig", "RunLogger", "load_experiment"]
