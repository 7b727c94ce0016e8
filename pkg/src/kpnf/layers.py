"""Parameter initialization and layer helpers shared by encoders and MLP heads.

Parameters live in flat dicts (dotted names -> DiffNode); initializers write
into the dict, forward helpers read from it. Kaiming-uniform init for
conv/linear weights, zeros for the final layer of every output head.
"""

from __future__ import annotations

import math

import numpy as np

from kpnf import diffcore as dc
from kpnf.diffcore import DiffNode

ParamDict = dict[str, DiffNode]


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_linear(
    params: ParamDict,
    name: str,
    rng: np.random.Generator,
    d_in: int,
    d_out: int,
    dtype=np.float64,
    zero: bool = False,
) -> None:
    if zero:
        w = np.zeros((d_in, d_out), dtype=dtype)
    else:
        w = kaiming_uniform(rng, d_in, (d_in, d_out), dtype)
    params[f"{name}.w"] = dc.parameter(w, dtype=dtype)
    params[f"{name}.b"] = dc.parameter(np.zeros(d_out, dtype=dtype), dtype=dtype)


def linear(params: ParamDict, name: str, x: DiffNode) -> DiffNode:
    return dc.add(dc.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def init_conv(
    params: ParamDict,
    name: str,
    rng: np.random.Generator,
    kh: int,
    kw: int,
    cin: int,
    cout: int,
    dtype=np.float64,
    zero: bool = False,
    bias: bool = True,
) -> None:
    fan_in = kh * kw * cin
    if zero:
        w = np.zeros((kh, kw, cin, cout), dtype=dtype)
    else:
        w = kaiming_uniform(rng, fan_in, (kh, kw, cin, cout), dtype)
    params[f"{name}.w"] = dc.parameter(w, dtype=dtype)
    if bias:
        params[f"{name}.b"] = dc.parameter(np.zeros(cout, dtype=dtype), dtype=dtype)


def conv(params: ParamDict, name: str, x: DiffNode, stride=1, padding=0) -> DiffNode:
    out = dc.conv2d(x, params[f"{name}.w"], stride=stride, padding=padding)
    b = params.get(f"{name}.b")
    if b is not None:
        out = dc.add(out, b)
    return out


def init_group_norm(params: ParamDict, name: str, channels: int, dtype=np.float64) -> None:
    params[f"{name}.gamma"] = dc.parameter(np.ones(channels, dtype=dtype), dtype=dtype)
    params[f"{name}.beta"] = dc.parameter(np.zeros(channels, dtype=dtype), dtype=dtype)


def group_norm(params: ParamDict, name: str, x: DiffNode, groups: int, eps: float = 1e-5) -> DiffNode:
    return dc.group_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"], groups=groups, eps=eps)


def cast_params(params: ParamDict, dtype) -> ParamDict:
    """Copy a parameter dict at a different precision (training vs testing)."""
    return {k: dc.parameter(v.values.astype(dtype), dtype=dtype) for k, v in params.items()}


def param_arrays(params: ParamDict) -> dict[str, np.ndarray]:
    return {k: v.values for k, v in params.items()}


def load_param_arrays(params: ParamDict, arrays: dict[str, np.ndarray]) -> None:
    """Overwrite parameter values in place from plain arrays (checkpoint load)."""
    for k, node in params.items():
        if k not in arrays:
            raise KeyError(f"checkpoint missing parameter {k!r}")
        arr = np.asarray(arrays[k], dtype=node.dtype)
        if arr.shape != node.shape:
            raise ValueError(f"parameter {k!r} shape {arr.shape} != expected {node.shape}")
        node.values[...] = arr
