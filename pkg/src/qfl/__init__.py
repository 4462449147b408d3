"""Simulator for federated learning with input-driven quantum chips.

A server ships its parameterized operator to clients as a quantum state; each
client's fixed chip applies whatever operator arrives, and gradients come back
from superposed parameter-shifted operator states.
"""
from .statevec import PureState, RegisterSpan
from .chip import RealOperator, VecEncodedOperator, chip_apply, vec_decode, vec_encode
from .model import AnsatzSpec, LabeledExample, ShiftStateSpec
from .config import ExperimentConfig, reference_config

__all__ = [
    "AnsatzSpec",
    "ExperimentConfig",
    "LabeledExample",
    "PureState",
    "RealOperator",
    "RegisterSpan",
    "ShiftStateSpec",
    "VecEncodedOperator",
    "chip_apply",
    "reference_config",
    "vec_decode",
    "vec_encode",
]
