"""Generative pre-training on neural-network checkpoints.

Thin convenience layer over the compiled core: every function takes plain
paths and dicts, hands JSON-shaped results back as dicts, and leaves the
heavy state (datasets, models) on disk in the same formats the CLI uses.
"""

import json as _json

from . import _core

__all__ = ["gen_data", "dataset_summary", "train", "sample", "alignment", "cli"]


def _cfg(config):
    return _json.dumps(config or {})


def gen_data(out_dir, config=None):
    """Train many task networks and store their checkpoints under out_dir."""
    return _json.loads(_core.gen_data(_cfg(config), str(out_dir)))


def dataset_summary(data_dir):
    """Sizes, metric names, and observed metric ranges of a stored dataset."""
    return _json.loads(_core.dataset_summary(str(data_dir)))


def train(data_dir, out_dir, config=None):
    """Pre-train the diffusion transformer on a dataset; returns the report."""
    return _json.loads(_core.train(_cfg(config), str(data_dir), str(out_dir)))


def sample(model_path, data_dir, prompt=None, steps=1, seed=0):
    """Sample updated parameters from a trained model, recursively if steps > 1."""
    return _json.loads(_core.sample(str(model_path), str(data_dir), prompt, steps, seed))


def alignment(model_path, data_dir, num_prompts=20, num_nets=128, seed=0):
    """Prompted-vs-achieved metric agreement (R^2) over a grid of prompts."""
    return _json.loads(
        _core.alignment(str(model_path), str(data_dir), num_prompts, num_nets, seed)
    )


def cli(*args):
    """Run one CLI invocation in-process; returns its exit code."""
    return _core.cli([str(a) for a in args])
