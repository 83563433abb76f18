"""Checkpoint persistence: config header text + named weight tensors."""

from __future__ import annotations

import hashlib

import numpy as np

from ..numerics import read_archive, write_archive
from .config import ModelConfig
from .network import PoseModel


def save_checkpoint(path, model: PoseModel) -> None:
    with open(path, "wb") as fh:
        write_archive(fh, model.cfg.to_text(), model.state())


def load_checkpoint(path, skeleton=None) -> PoseModel:
    with open(path, "rb") as fh:
        header, tensors = read_archive(fh)
    cfg = ModelConfig.from_text(header)
    model = PoseModel(cfg, seed=0, skeleton=skeleton)
    model.load_state(tensors)
    return model


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
