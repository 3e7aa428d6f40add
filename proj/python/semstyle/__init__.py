"""Constrained StyleGAN fine-tuning for portrait stylization.

Images are float32 arrays of shape (3, R, R) with values in [-1, 1]. Use
``from_uint8`` / ``to_uint8`` to convert from and to (R, R, 3) uint8 pixels.
"""

import numpy as np

# libtorch must be loaded before the extension that links against it.
import torch  # noqa: F401

from ._core import (
    ConfigError,
    ConflictError,
    InvalidInputError,
    LoadError,
    NotFoundError,
    NumericAbortError,
    SemstyleError,
    StyleSession,
    evaluate,
    fid,
    finetune,
    finetune_unconstrained,
    load_image,
    make_data,
    make_pairs,
    pretrain,
    save_png,
    scaled_mix_indices,
    stylize_file,
    train_encoder,
)

__all__ = [
    "ConfigError",
    "ConflictError",
    "InvalidInputError",
    "LoadError",
    "NotFoundError",
    "NumericAbortError",
    "SemstyleError",
    "StyleSession",
    "bootstrap",
    "evaluate",
    "fid",
    "finetune",
    "finetune_unconstrained",
    "from_uint8",
    "load_image",
    "make_data",
    "make_pairs",
    "pretrain",
    "save_png",
    "scaled_mix_indices",
    "stylize_file",
    "to_uint8",
    "train_encoder",
]


def from_uint8(pixels):
    """(R, R, 3) uint8 pixels to a (3, R, R) float32 image in [-1, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected (R, R, 3) pixels, got shape {arr.shape}")
    return (arr.astype(np.float32).transpose(2, 0, 1) / 127.5) - 1.0


def to_uint8(image):
    """(3, R, R) image in [-1, 1] to (R, R, 3) uint8 pixels."""
    arr = np.asarray(image, dtype=np.float32)
    return np.clip(np.rint((arr.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def bootstrap(workspace, **kwargs):
    """Runs every training stage in order and returns the reports by stage."""
    reports = {"make_data": make_data(workspace, **kwargs), "pretrain": pretrain(workspace, **kwargs)}
    for space in ("W", "WPlus", "ZPlus"):
        reports[f"encoder_{space}"] = train_encoder(space, workspace, **kwargs)
    reports["finetune_unconstrained"] = finetune_unconstrained(workspace, **kwargs)
    reports["make_pairs"] = make_pairs(workspace, **kwargs)
    reports["finetune"] = finetune(workspace, **kwargs)
    return reports
