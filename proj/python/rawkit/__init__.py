"""Invertible camera ISP: RAW -> RGB rendering, RGB -> RAW reconstruction, fitting and scoring."""

import json
import os

import numpy as np

from . import _rawkit
from ._rawkit import Error, pack, psnr, run_cli, ssim, unpack

__all__ = [
    "Error",
    "forward",
    "reverse",
    "fit",
    "synth",
    "random_params",
    "load_params",
    "psnr",
    "ssim",
    "pack",
    "unpack",
    "run_cli",
]


def _params_json(params):
    if isinstance(params, (str, os.PathLike)) and os.path.exists(params):
        with open(params, encoding="utf-8") as f:
            return f.read()
    if isinstance(params, str):
        return params
    return json.dumps(params)


def load_params(params):
    """Validated params as a dict, from a dict, JSON text or a file path."""
    return json.loads(_rawkit.check_params(_params_json(params)))


def random_params(seed):
    return json.loads(_rawkit.random_params(seed))


def forward(raw, params, threads=1):
    """Packed (h, w, 4) uint16 RAW -> ((2h, 2w, 3) uint8 RGB, clip mask)."""
    return _rawkit.forward(np.asarray(raw), _params_json(params), threads)


def reverse(rgb, params, threads=1, ensemble=False, dither=False, seed=0, clip="clamp"):
    """(h, w, 3) uint8 RGB -> (packed (h/2, w/2, 4) uint16 RAW, clip mask)."""
    return _rawkit.reverse(np.asarray(rgb), _params_json(params), threads, ensemble, dither, seed, clip)


def fit(rgbs, raws, levels, full_frame=True, loss="l2", tau=0.98, max_iterations=100):
    """Fit params to aligned pairs; `levels` is any params document carrying the sensor levels.

    Returns the fit report dict; the fitted params are under "params".
    """
    report = _rawkit.fit(
        [np.asarray(x) for x in rgbs],
        [np.asarray(x) for x in raws],
        _params_json(levels),
        full_frame,
        loss,
        tau,
        max_iterations,
    )
    return json.loads(report)


def synth(params, size, seed=0, kind="mixed", noise=0.0):
    """Synthetic scene: (packed RAW, RGB rendering, clip mask)."""
    return _rawkit.synth(_params_json(params), size, seed, kind, noise)
