"""Heterogeneous traffic-agent trajectory prediction on a 4D graph.

Modules: ``autodiff`` (reverse-mode tape), ``nn`` (LSTM cells, embeddings,
parameter registry), ``graph4d`` (graph construction), ``model`` (instance and
category layers, Gaussian head, rollouts), ``train``, ``data``, ``eval`` and
``cli``.
"""

from .data import (ScenarioSpec, SceneWindow, TrajectoryRecord, default_benchmark, generate_scenario,
                   load_trajectories, normalize_window, save_trajectories, slice_windows)
from .errors import (ConfigurationError, DimensionError, NumericDomainError, NumericError, ParseError,
                     TrafficPredictError, UsageError, ValidationError)
from .eval import MetricsReport, ade, constant_velocity_baseline, evaluate, fde
from .graph4d import AgentObservation, FrameObservation, Graph4D, build_graph
from .model import GaussianParams, ModelConfig, init_model, nll_loss, rollout
from .train import OptimizerState, TrainConfig, adam_step, clip_gradients, train_epochs

__version__ = "0.1.0"
