"""Few-shot shape segmentation with task-adaptive feature transforms."""

import json as _json

from ._core import Model, TaftError, gradient_check, sample_episode, train_json as _train_json

__all__ = ["Model", "TaftError", "evaluate", "gradient_check", "sample_episode", "train"]


def train(config, out_dir):
    """Runs episodic training from a config dict, returns the final checkpoint path."""
    return _train_json(_json.dumps(dict(config)), str(out_dir))


def evaluate(model, split=0, shots=1, queries=5, episodes_per_class=50, scales=(1.0,),
             seed=0, ridge=1e-6, workers=1):
    """Evaluates a model on a split's held-out classes, returns the report as a dict."""
    text = model._evaluate_json(split, shots, queries, episodes_per_class, list(scales),
                                seed, ridge, workers)
    return _json.loads(text)
