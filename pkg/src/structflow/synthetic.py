"""Planted models for synthetic corpora.

A planted model is described by a small JSON-compatible dict, e.g.::

    {"structure": "markov", "K": 3, "dim": 4, "depth": 2, "separation": 12.0,
     "variance": 1.0, "seed": 7}

Means sit on a scaled simplex-like layout so that every pair is at least
``separation`` standard deviations apart.
"""
import numpy as np

from . import dmv, markov
from .flow import init_flow
from .joint import DMV, MARKOV, GaussianEmissions, JointModel

SPEC_KEYS = {
    "structure", "K", "dim", "depth", "separation", "variance", "seed",
    "flow_scale", "self_transition", "cycle_strength", "root_logits", "attach_logits", "stop_logits",
}


def separated_means(K, dim, separation, rng):
    """K means with all pairwise distances >= ``separation``."""
    if K <= dim:
        base = np.eye(dim)[:K] * (separation / np.sqrt(2.0))
    else:
        # random directions, rescaled until the closest pair is far enough
        base = rng.standard_normal((K, dim))
        dists = np.linalg.norm(base[:, None] - base[None], axis=2) + np.eye(K) * np.inf
        base *= separation / dists.min()
    return base - base.mean(axis=0)


def planted_model(spec):
    unknown = set(spec) - SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown planted-model keys: {sorted(unknown)}")
    structure = spec.get("structure", MARKOV)
    K = int(spec["K"])
    dim = int(spec["dim"])
    depth = int(spec.get("depth", 0))
    sep = float(spec.get("separation", 10.0))
    var = float(spec.get("variance", 1.0))
    rng = np.random.default_rng(spec.get("seed", 0))
    means = separated_means(K, dim, sep * np.sqrt(var), rng)
    emissions = GaussianEmissions(means, np.full((K, dim), var))
    flow = init_flow(dim, depth, rng.integers(2**32), float(spec.get("flow_scale", 1.0)))
    if structure == MARKOV:
        stay = float(spec.get("self_transition", 0.0))
        cycle = float(spec.get("cycle_strength", 0.0))
        trans = rng.uniform(0.0, 1.0, size=(K, K)) + stay * np.eye(K) + cycle * np.roll(np.eye(K), 1, axis=1)
        syntax = markov.MarkovParams(rng.uniform(0.0, 1.0, size=K), trans)
    elif structure == DMV:
        syntax = dmv.DmvParams(
            np.asarray(spec.get("root_logits", np.zeros(K)), dtype=float),
            np.asarray(spec.get("attach_logits", np.zeros((K, 2, K))), dtype=float),
            np.asarray(spec.get("stop_logits", np.zeros((K, 2, 2))), dtype=float),
        )
    else:
        raise ValueError(f"unknown structure {structure!r}")
    return JointModel(flow, emissions, syntax)
