"""Whittle-index MAC scheduling: tabular oracle, simulator, index networks, scheduler."""

from .env import ChannelProcess, ServiceClassSpec, TrafficModel, UEState, default_class
from .metrics import MetricsReport, MetricsRecorder
from .net import WhittleNetwork
from .oracle import TabularMDP, index_table, value_iterate, whittle_index
from .scheduler import OracleIndexPolicy, ScenarioSpec, SliceConfig, run_scenario
from .trainer import TrainConfig, train

__version__ = "0.1.0"
