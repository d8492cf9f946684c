"""Small deterministic numpy neural-network engine (dense, LSTM, dropout, Adam)."""

from .layers import Dense, Dropout, Layer, Lstm, RepeatVector
from .model import ParameterSet, ParamSlot, SequentialModel, count_params, one_hot
from .optim import AdamState, adam_step
from .serialize import deserialize, from_json, serialize, to_json
from .training import EarlyStopping, TrainConfig, TrainReport, train

__all__ = [
    "AdamState",
    "Dense",
    "Dropout",
    "EarlyStopping",
    "Layer",
    "Lstm",
    "ParamSlot",
    "ParameterSet",
    "RepeatVector",
    "SequentialModel",
    "TrainConfig",
    "TrainReport",
    "adam_step",
    "count_params",
    "deserialize",
    "from_json",
    "one_hot",
    "serialize",
    "to_json",
    "train",
]
