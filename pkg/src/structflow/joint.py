"""Flow + per-tag diagonal Gaussians + structured prior.

The log likelihood of a sentence is the prior's log marginal over the
emission scores ``log N(f^-1(x_i); mu_k, diag var_k) + log|det J|``, where the
Jacobian term is zero for the additive flow but is still carried through.
"""
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import dmv, markov
from .data_io import Corpus, Sentence
from .flow import Flow, forward_apply, inverse_apply, inverse_apply_with_grad

VARIANCE_FLOOR = 1e-6
MARKOV = "markov"
DMV = "dmv"

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianEmissions:
    means: np.ndarray
    variances: np.ndarray
    trainable_variance: bool = False

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64)
        self.variances = np.maximum(np.array(self.variances, dtype=np.float64), VARIANCE_FLOOR)
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must have the same shape")

    @property
    def K(self):
        return self.means.shape[0]

    def log_density(self, e):
        """(n, K) matrix of log N(e_n; mu_k, diag var_k)."""
        inv_v = 1.0 / self.variances
        const = np.log(self.variances).sum(axis=1) + (self.means**2 * inv_v).sum(axis=1) + e.shape[1] * LOG_2PI
        quad = (e**2) @ inv_v.T - 2.0 * e @ (self.means * inv_v).T
        return -0.5 * (quad + const)

    def copy(self):
        return GaussianEmissions(self.means.copy(), self.variances.copy(), self.trainable_variance)


def init_emissions(K, latents, seed=None, noise=0.1, trainable_variance=False):
    """Means at the empirical mean plus N(0, noise^2) jitter; variances at the empirical variance."""
    rng = np.random.default_rng(seed)
    latents = np.asarray(latents, dtype=np.float64)
    mean = latents.mean(axis=0)
    var = latents.var(axis=0)
    means = mean + noise * rng.standard_normal((K, latents.shape[1]))
    return GaussianEmissions(means, np.tile(var, (K, 1)), trainable_variance)


@dataclass
class JointModel:
    flow: Flow
    emissions: GaussianEmissions
    syntax: Union[markov.MarkovParams, dmv.DmvParams]

    def __post_init__(self):
        if self.emissions.K != self.syntax.K:
            raise ValueError(f"emissions have {self.emissions.K} states, syntax model has {self.syntax.K}")
        if self.emissions.means.shape[1] != self.flow.dim:
            raise ValueError("emission dimension differs from flow dimension")

    @property
    def structure(self):
        return MARKOV if isinstance(self.syntax, markov.MarkovParams) else DMV

    @property
    def K(self):
        return self.syntax.K

    @property
    def dim(self):
        return self.flow.dim

    def params(self):
        """Trainable arrays in a fixed order: flow, means, [variances], syntax."""
        ps = self.flow.params() + [self.emissions.means]
        if self.emissions.trainable_variance:
            ps.append(self.emissions.variances)
        return ps + self.syntax.params()

    def copy(self):
        return JointModel(self.flow.copy(), self.emissions.copy(), self.syntax.copy())


@dataclass
class Gradients:
    flow: list
    means: np.ndarray
    variances: Optional[np.ndarray]
    syntax: list
    log_likelihood: float

    def as_list(self):
        """Aligned with ``JointModel.params()``."""
        out = list(self.flow) + [self.means]
        if self.variances is not None:
            out.append(self.variances)
        return out + list(self.syntax)

    def __iadd__(self, other):
        for a, b in zip(self.as_list(), other.as_list()):
            a += b
        self.log_likelihood += other.log_likelihood
        return self


def _embeddings(sentence):
    return np.asarray(getattr(sentence, "embeddings", sentence), dtype=np.float64)


def _stack(sentences):
    arrays = [_embeddings(s) for s in sentences]
    offsets = np.zeros(len(arrays) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([a.shape[0] for a in arrays])
    return np.concatenate(arrays, axis=0), offsets


def emission_log_scores(model, sentence):
    """Return ``(scores, e)`` for one sentence (or an (n, d) array)."""
    x = _embeddings(sentence)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"expected embeddings of dimension {model.dim}, got shape {x.shape}")
    e, log_det = inverse_apply(model.flow, x)
    return model.emissions.log_density(e) + log_det[:, None], e


def _syntax_tables(model):
    if model.structure == MARKOV:
        return model.syntax.log_init(), model.syntax.log_trans()
    return dmv._tables(model.syntax)


def sentence_log_likelihoods(model, sentences):
    """Per-sentence log likelihoods for a list of sentences."""
    x, offsets = _stack(sentences)
    scores, _ = emission_log_scores(model, x)
    if model.structure == MARKOV:
        return markov.markov_log_z_kernel(*_syntax_tables(model), scores, offsets)
    return dmv.dmv_log_z_kernel(*_syntax_tables(model), scores, offsets)


def corpus_log_likelihood(model, sentences):
    return float(np.sum(sentence_log_likelihoods(model, list(sentences))))


def sentence_log_likelihood(model, sentence):
    scores, _ = emission_log_scores(model, sentence)
    if model.structure == MARKOV:
        return markov.log_marginal(model.syntax, scores)
    return dmv.dmv_log_marginal(model.syntax, scores)


def batch_gradients(model, sentences):
    """Exact gradient of the summed log likelihood of ``sentences``."""
    x, offsets = _stack(sentences)
    scores, e = emission_log_scores(model, x)
    if model.structure == MARKOV:
        log_z, post, c_init, c_trans = markov.markov_batch_kernel(*_syntax_tables(model), scores, offsets)
        g_syntax = list(markov.logit_grads(model.syntax, c_init, c_trans))
    else:
        log_z, post, *counts = dmv.dmv_batch_kernel(*_syntax_tables(model), scores, offsets)
        g_syntax = list(dmv.logit_grads(model.syntax, *counts))

    em = model.emissions
    inv_v = 1.0 / em.variances
    occ = post.sum(axis=0)[:, None]
    first = post.T @ e
    g_means = (first - occ * em.means) * inv_v
    g_var = None
    if em.trainable_variance:
        second = post.T @ (e**2)
        sq = second - 2.0 * first * em.means + occ * em.means**2
        g_var = 0.5 * sq * inv_v**2 - 0.5 * occ * inv_v
    g_e = post @ (em.means * inv_v) - e * (post @ inv_v)
    _, _, g_flow = inverse_apply_with_grad(model.flow, x, g_e)
    return Gradients(g_flow, g_means, g_var, g_syntax, float(np.sum(log_z)))


def grad_sentence(model, sentence):
    return batch_gradients(model, [sentence])


def _draw_length(length_distribution, rng):
    if callable(length_distribution):
        n = int(length_distribution(rng))
    elif isinstance(length_distribution, (tuple, list)):
        lo, hi = length_distribution
        n = int(rng.integers(lo, hi + 1))
    else:
        n = int(length_distribution)
    if n < 1:
        raise ValueError(f"sentence length must be positive, got {n}")
    return n


def _length_bounds(length_distribution):
    if isinstance(length_distribution, (tuple, list)):
        lo, hi = length_distribution
    elif callable(length_distribution):
        raise ValueError("DMV sampling needs an integer or (min, max) length range")
    else:
        lo = hi = int(length_distribution)
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {length_distribution!r}")
    return int(lo), int(hi)


def _sample_markov_tags(params, n, rng):
    p0 = np.exp(params.log_init())
    pt = np.exp(params.log_trans())
    z = [int(rng.choice(params.K, p=p0))]
    for _ in range(n - 1):
        z.append(int(rng.choice(params.K, p=pt[z[-1]])))
    return z


def _sample_dmv_tree(params, max_len, rng):
    """Head-outward derivation; returns None once it grows past ``max_len``."""
    p_root = np.exp(params.log_root())
    p_att = np.exp(params.log_attach())
    p_stop = np.exp(params.log_stop())
    size = [1]

    def expand(tag):
        # returns nested (left_subtrees, tag, right_subtrees) with linear order implied
        sides = []
        for d in (dmv.LEFT, dmv.RIGHT):
            kids = []
            v = dmv.ADJ
            while rng.random() >= p_stop[tag, d, v]:
                size[0] += 1
                if size[0] > max_len:
                    raise OverflowError
                kids.append(expand(int(rng.choice(params.K, p=p_att[tag, d]))))
                v = dmv.NONADJ
            sides.append(kids)
        return sides[0], tag, sides[1]

    try:
        tree = expand(int(rng.choice(params.K, p=p_root)))
    except OverflowError:
        return None

    order_nodes = []  # (tag, parent node id)
    order = []  # node ids in surface order

    def walk(node, parent_id):
        left, tag, right = node
        my_id = len(order_nodes)
        order_nodes.append((tag, parent_id))
        for kid in reversed(left):
            walk(kid, my_id)
        order.append(my_id)
        for kid in right:
            walk(kid, my_id)

    walk(tree, -1)
    pos_of = {node_id: p for p, node_id in enumerate(order)}
    tags = [order_nodes[nid][0] for nid in order]
    heads = [0 if order_nodes[nid][1] < 0 else pos_of[order_nodes[nid][1]] + 1 for nid in order]
    return heads, tags


def sample_corpus(model, n_sentences, length_distribution=(3, 10), seed=None):
    """Ancestral samples from the model, with gold tags (and heads for DMV)."""
    if n_sentences < 1:
        raise ValueError("n_sentences must be positive")
    if not callable(length_distribution):
        _length_bounds(length_distribution)
    rng = np.random.default_rng(seed)
    em = model.emissions
    sentences = []
    for s in range(n_sentences):
        heads = None
        if model.structure == MARKOV:
            tags = _sample_markov_tags(model.syntax, _draw_length(length_distribution, rng), rng)
        else:
            lo, hi = _length_bounds(length_distribution)
            while True:
                out = _sample_dmv_tree(model.syntax, hi, rng)
                if out is not None and len(out[1]) >= lo:
                    heads, tags = out
                    break
        z = np.asarray(tags)
        e = em.means[z] + np.sqrt(em.variances[z]) * rng.standard_normal((len(z), model.dim))
        x = forward_apply(model.flow, e)
        toks = [f"w{s}_{i}" for i in range(len(z))]
        sentences.append(Sentence(toks, x, [str(t) for t in tags], heads))
    return Corpus(sentences)
