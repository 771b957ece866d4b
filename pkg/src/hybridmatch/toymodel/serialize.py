"""Flat text format for decoder parameters.

Layout::

    hybridmatch-toy-params v1
    <parameter count>
    <name> <dim0>x<dim1>... <value> <value> ...

One parameter per line in ``named_parameters`` order, values in ``repr``
form so a round trip is exact. A scalar has the shape token ``-``.
"""
from __future__ import annotations

import numpy as np
import torch

from ..errors import ConfigError

HEADER = "hybridmatch-toy-params v1"


def dumps(model: torch.nn.Module) -> str:
    params = list(model.named_parameters())
    lines = [HEADER, str(len(params))]
    for name, p in params:
        arr = p.detach().numpy().astype(np.float64)
        shape = "x".join(str(s) for s in arr.shape) or "-"
        lines.append(" ".join([name, shape] + [repr(float(v)) for v in arr.ravel()]))
    return "\n".join(lines) + "\n"


def loads(model: torch.nn.Module, text: str) -> None:
    lines = text.splitlines()
    if not lines or lines[0] != HEADER:
        raise ConfigError(f"unrecognized parameter file header {lines[0]!r}" if lines else "empty file")
    count = int(lines[1])
    params = dict(model.named_parameters())
    if count != len(params) or len(lines) - 2 != count:
        raise ConfigError(f"file holds {count} parameters, model has {len(params)}")
    with torch.no_grad():
        for line in lines[2:]:
            name, shape, *vals = line.split(" ")
            if name not in params:
                raise ConfigError(f"unknown parameter {name}")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split("x"))
            if tuple(params[name].shape) != dims:
                raise ConfigError(f"{name}: file shape {dims} != model shape {tuple(params[name].shape)}")
            params[name].copy_(torch.tensor([float(v) for v in vals], dtype=params[name].dtype).reshape(dims))


def save_params(model: torch.nn.Module, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(model))


def load_params(model: torch.nn.Module, path) -> None:
    with open(path) as fh:
        loads(model, fh.read())
