"""Markov-chain prior over latent tags.

Transitions and the initial distribution are softmax-normalised logits.
There is no end-of-sentence transition. Everything runs in natural-log space.
"""
from dataclasses import dataclass

import numpy as np

from ._accel import NEG_INF, jit, logsumexp_cols, logsumexp_rows, logsumexp_vec


@dataclass
class MarkovParams:
    init_logits: np.ndarray
    trans_logits: np.ndarray

    @property
    def K(self):
        return self.init_logits.shape[0]

    def log_init(self):
        return self.init_logits - logsumexp_vec(self.init_logits)

    def log_trans(self):
        return self.trans_logits - logsumexp_rows(self.trans_logits)[:, None]

    def params(self):
        return [self.init_logits, self.trans_logits]

    def copy(self):
        return MarkovParams(self.init_logits.copy(), self.trans_logits.copy())


def init_markov(K, seed=None):
    """Logits drawn i.i.d. from U[0, 1], i.e. probabilities proportional to exp(u)."""
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    return MarkovParams(rng.uniform(0.0, 1.0, size=K), rng.uniform(0.0, 1.0, size=(K, K)))


def _check(params, scores):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] != params.K or scores.shape[0] < 1:
        raise ValueError(f"scores must have shape (length >= 1, {params.K}), got {scores.shape}")
    if np.any(np.all(scores == -np.inf, axis=1)):
        raise ValueError("a token has -inf emission score under every state")
    return scores


@jit
def _forward(log_pi, log_A, scores):
    n, K = scores.shape
    alpha = np.empty((n, K))
    alpha[0] = log_pi + scores[0]
    for i in range(1, n):
        alpha[i] = logsumexp_cols(alpha[i - 1][:, None] + log_A) + scores[i]
    return alpha


@jit
def _backward(log_A, scores):
    n, K = scores.shape
    beta = np.empty((n, K))
    beta[n - 1] = 0.0
    for i in range(n - 2, -1, -1):
        beta[i] = logsumexp_rows(log_A + (scores[i + 1] + beta[i + 1])[None, :])
    return beta


@jit
def _posteriors(log_pi, log_A, scores):
    alpha = _forward(log_pi, log_A, scores)
    beta = _backward(log_A, scores)
    n, K = scores.shape
    log_z = logsumexp_vec(alpha[n - 1])
    gamma = np.exp(alpha + beta - log_z)
    xi = np.empty((max(n - 1, 0), K, K))
    for i in range(n - 1):
        xi[i] = np.exp(alpha[i][:, None] + log_A + (scores[i + 1] + beta[i + 1])[None, :] - log_z)
    return gamma, xi, log_z


@jit
def markov_batch_kernel(log_pi, log_A, scores, offsets):
    """Posterior statistics for a batch of concatenated sentences.

    Sentence ``s`` occupies rows ``offsets[s]:offsets[s + 1]`` of ``scores``.
    Returns per-sentence log marginals, token posteriors, summed initial-state
    posteriors and summed pairwise posteriors.
    """
    n_sent = offsets.shape[0] - 1
    K = scores.shape[1]
    log_z = np.empty(n_sent)
    gamma = np.empty(scores.shape)
    init_counts = np.zeros(K)
    trans_counts = np.zeros((K, K))
    for s in range(n_sent):
        a, b = offsets[s], offsets[s + 1]
        g, xi, lz = _posteriors(log_pi, log_A, scores[a:b])
        gamma[a:b] = g
        log_z[s] = lz
        init_counts += g[0]
        for i in range(xi.shape[0]):
            trans_counts += xi[i]
    return log_z, gamma, init_counts, trans_counts


@jit
def markov_log_z_kernel(log_pi, log_A, scores, offsets):
    n_sent = offsets.shape[0] - 1
    out = np.empty(n_sent)
    for s in range(n_sent):
        alpha = _forward(log_pi, log_A, scores[offsets[s]:offsets[s + 1]])
        out[s] = logsumexp_vec(alpha[alpha.shape[0] - 1])
    return out


# candidates closer than this (relative) count as tied, so summation-order
# noise cannot override the lower-index rule
TIE_TOL = 1e-12


@jit
def _first_max(v):
    best = 0
    for j in range(1, v.shape[0]):
        if v[best] == NEG_INF:
            if v[j] > v[best]:
                best = j
        elif v[j] > v[best] + TIE_TOL * (1.0 + abs(v[best])):
            best = j
    return best


@jit
def _viterbi(log_pi, log_A, scores):
    n, K = scores.shape
    delta = log_pi + scores[0]
    back = np.zeros((n, K), dtype=np.int64)
    for i in range(1, n):
        cand = delta[:, None] + log_A
        new = np.empty(K)
        for k in range(K):
            j = _first_max(cand[:, k])
            back[i, k] = j
            new[k] = cand[j, k] + scores[i, k]
        delta = new
    path = np.empty(n, dtype=np.int64)
    path[n - 1] = _first_max(delta)
    best = delta[path[n - 1]]
    for i in range(n - 1, 0, -1):
        path[i - 1] = back[i, path[i]]
    return path, best


def log_marginal(params, scores):
    """log sum over tag sequences of prior times exp(emission scores)."""
    scores = _check(params, scores)
    alpha = _forward(params.log_init(), params.log_trans(), scores)
    return float(logsumexp_vec(alpha[-1]))


def forward_backward(params, scores):
    """Return ``(gamma, xi, log_marginal)``.

    ``gamma[i, k]`` is the posterior of state k at position i and
    ``xi[i, j, k]`` that of the pair (j at i, k at i + 1).
    """
    scores = _check(params, scores)
    gamma, xi, log_z = _posteriors(params.log_init(), params.log_trans(), scores)
    return gamma, xi, float(log_z)


def viterbi(params, scores):
    """Best tag sequence; ties go to the lower state index."""
    scores = _check(params, scores)
    path, _ = _viterbi(params.log_init(), params.log_trans(), scores)
    return [int(k) for k in path]


def viterbi_score(params, scores):
    scores = _check(params, scores)
    _, best = _viterbi(params.log_init(), params.log_trans(), scores)
    return float(best)


def logit_grads(params, init_counts, trans_counts):
    """Chain expected counts through the softmax parameterisation."""
    p_init = np.exp(params.log_init())
    p_trans = np.exp(params.log_trans())
    g_init = init_counts - init_counts.sum() * p_init
    g_trans = trans_counts - trans_counts.sum(axis=1, keepdims=True) * p_trans
    return g_init, g_trans


def grad_log_marginal(params, scores):
    """Gradients of the log marginal w.r.t. both logit tables and the scores."""
    gamma, xi, _ = forward_backward(params, scores)
    g_init, g_trans = logit_grads(params, gamma[0], xi.sum(axis=0))
    return g_init, g_trans, gamma
