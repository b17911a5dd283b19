"""Dependency model with valence over latent tags.

Generative story: the root picks the tag of a single head word. Every head,
independently to its left and to its right, repeatedly decides whether to
continue (valence is *adjacent* until the first child in that direction has
been generated, *non-adjacent* afterwards); on continue it draws a child tag
and the child expands recursively, nearest child first. Each token also emits
its observation, whose log score is supplied from outside.

Charts follow the split-head scheme (each head's left and right halves are
built separately), which makes the inside pass O(n^3 K^2). Positions are
0-based internally; parses use 1-based heads with 0 for the root.
"""
from dataclasses import dataclass

import numpy as np

from ._accel import NEG_INF, jit, logsumexp_rows, logsumexp_vec

LEFT, RIGHT = 0, 1
ADJ, NONADJ = 0, 1


@dataclass
class DmvParams:
    """Logit parameterisation.

    ``attach_logits[h, dir, c]`` scores child tag ``c`` for a head tagged ``h``
    in direction ``dir``; ``stop_logits[h, dir, valence]`` is the logit of
    STOP versus CONTINUE.
    """

    root_logits: np.ndarray
    attach_logits: np.ndarray
    stop_logits: np.ndarray

    @property
    def K(self):
        return self.root_logits.shape[0]

    def log_root(self):
        return self.root_logits - logsumexp_vec(self.root_logits)

    def log_attach(self):
        a = self.attach_logits
        norm = logsumexp_rows(a.reshape(-1, a.shape[2])).reshape(a.shape[0], 2, 1)
        return a - norm

    def log_stop(self):
        return -np.logaddexp(0.0, -self.stop_logits)

    def log_continue(self):
        return -np.logaddexp(0.0, self.stop_logits)

    def params(self):
        return [self.root_logits, self.attach_logits, self.stop_logits]

    def copy(self):
        return DmvParams(*(p.copy() for p in self.params()))


@dataclass
class DependencyParse:
    heads: list
    tags: list


def uniform_dmv(K):
    return DmvParams(np.zeros(K), np.zeros((K, 2, K)), np.zeros((K, 2, 2)))


def init_dmv(K, seed=None):
    """Random logits from U[0, 1], mirroring the Markov initialisation."""
    rng = np.random.default_rng(seed)
    return DmvParams(
        rng.uniform(0.0, 1.0, size=K),
        rng.uniform(0.0, 1.0, size=(K, 2, K)),
        rng.uniform(0.0, 1.0, size=(K, 2, 2)),
    )


def _tables(params):
    return (
        params.log_root(),
        np.ascontiguousarray(params.log_attach()),
        params.log_stop(),
        params.log_continue(),
    )


@jit
def _inside(log_root, log_att, log_stop, log_cont, scores):
    n, K = scores.shape
    CL = np.full((n, n, K), NEG_INF)
    CR = np.full((n, n, K), NEG_INF)
    SL = np.full((n, n, K), NEG_INF)
    SR = np.full((n, n, K), NEG_INF)
    IL = np.full((n, n, K, K), NEG_INF)
    IR = np.full((n, n, K, K), NEG_INF)
    att_l = log_att[:, LEFT, :]
    att_r = log_att[:, RIGHT, :]
    for i in range(n):
        CL[i, i] = scores[i]
        CR[i, i] = 0.0
        SL[i, i] = scores[i] + log_stop[:, LEFT, ADJ]
        SR[i, i] = log_stop[:, RIGHT, ADJ]
    for w in range(1, n):
        for i in range(n - w):
            j = i + w
            # head i takes child j; head j takes child i
            acc_r = np.full((K, K), NEG_INF)
            acc_l = np.full((K, K), NEG_INF)
            for k in range(i, j):
                v = ADJ if k == i else NONADJ
                term = (CR[i, k] + log_cont[:, RIGHT, v])[:, None] + att_r + SL[k + 1, j][None, :]
                acc_r = np.logaddexp(acc_r, term)
                v = ADJ if k + 1 == j else NONADJ
                term = (CL[k + 1, j] + log_cont[:, LEFT, v])[:, None] + att_l + SR[i, k][None, :]
                acc_l = np.logaddexp(acc_l, term)
            IR[i, j] = acc_r
            IL[i, j] = acc_l
            acc = np.full(K, NEG_INF)
            for m in range(i + 1, j + 1):
                acc = np.logaddexp(acc, logsumexp_rows(IR[i, m] + SR[m, j][None, :]))
            CR[i, j] = acc
            acc = np.full(K, NEG_INF)
            for m in range(i, j):
                acc = np.logaddexp(acc, logsumexp_rows(IL[m, j] + SL[i, m][None, :]))
            CL[i, j] = acc
            SL[i, j] = CL[i, j] + log_stop[:, LEFT, NONADJ]
            SR[i, j] = CR[i, j] + log_stop[:, RIGHT, NONADJ]
    root_terms = np.empty((n, K))
    for h in range(n):
        root_terms[h] = log_root + SL[0, h] + SR[h, n - 1]
    log_z = logsumexp_vec(root_terms.ravel())
    return CL, CR, SL, SR, IL, IR, root_terms, log_z


@jit
def _safe_norm(x):
    # -inf normalisers become +inf so exp(term - norm) is 0, not nan
    return np.where(x == NEG_INF, np.inf, x)


@jit
def _outside(log_root, log_att, log_stop, log_cont, scores):
    """Inside pass followed by its adjoint.

    Adjoints are derivatives of the log marginal w.r.t. each log item, i.e.
    posterior item probabilities, so they stay in linear space.
    """
    CL, CR, SL, SR, IL, IR, root_terms, log_z = _inside(log_root, log_att, log_stop, log_cont, scores)
    n, K = scores.shape
    aCL = np.zeros((n, n, K))
    aCR = np.zeros((n, n, K))
    aSL = np.zeros((n, n, K))
    aSR = np.zeros((n, n, K))
    aIL = np.zeros((n, n, K, K))
    aIR = np.zeros((n, n, K, K))
    c_root = np.zeros(K)
    c_att = np.zeros((K, 2, K))
    c_stop = np.zeros((K, 2, 2))
    c_cont = np.zeros((K, 2, 2))
    att_l = log_att[:, LEFT, :]
    att_r = log_att[:, RIGHT, :]

    for h in range(n):
        p = np.exp(root_terms[h] - log_z)
        c_root += p
        aSL[0, h] += p
        aSR[h, n - 1] += p

    for w in range(n - 1, 0, -1):
        for i in range(n - w):
            j = i + w
            aCL[i, j] += aSL[i, j]
            c_stop[:, LEFT, NONADJ] += aSL[i, j]
            aCR[i, j] += aSR[i, j]
            c_stop[:, RIGHT, NONADJ] += aSR[i, j]

            norm = _safe_norm(CR[i, j])[:, None]
            for m in range(i + 1, j + 1):
                wts = aCR[i, j][:, None] * np.exp(IR[i, m] + SR[m, j][None, :] - norm)
                aIR[i, m] += wts
                aSR[m, j] += wts.sum(axis=0)
            norm = _safe_norm(CL[i, j])[:, None]
            for m in range(i, j):
                wts = aCL[i, j][:, None] * np.exp(IL[m, j] + SL[i, m][None, :] - norm)
                aIL[m, j] += wts
                aSL[i, m] += wts.sum(axis=0)

            norm_r = _safe_norm(IR[i, j])
            norm_l = _safe_norm(IL[i, j])
            for k in range(i, j):
                v = ADJ if k == i else NONADJ
                term = (CR[i, k] + log_cont[:, RIGHT, v])[:, None] + att_r + SL[k + 1, j][None, :]
                wts = aIR[i, j] * np.exp(term - norm_r)
                rows = wts.sum(axis=1)
                aCR[i, k] += rows
                c_cont[:, RIGHT, v] += rows
                c_att[:, RIGHT, :] += wts
                aSL[k + 1, j] += wts.sum(axis=0)

                v = ADJ if k + 1 == j else NONADJ
                term = (CL[k + 1, j] + log_cont[:, LEFT, v])[:, None] + att_l + SR[i, k][None, :]
                wts = aIL[i, j] * np.exp(term - norm_l)
                rows = wts.sum(axis=1)
                aCL[k + 1, j] += rows
                c_cont[:, LEFT, v] += rows
                c_att[:, LEFT, :] += wts
                aSR[i, k] += wts.sum(axis=0)

    tag_post = np.empty((n, K))
    for i in range(n):
        c_stop[:, LEFT, ADJ] += aSL[i, i]
        c_stop[:, RIGHT, ADJ] += aSR[i, i]
        tag_post[i] = aCL[i, i] + aSL[i, i]
    return log_z, tag_post, c_root, c_att, c_stop, c_cont


@jit
def dmv_batch_kernel(log_root, log_att, log_stop, log_cont, scores, offsets):
    """Log marginals, tag posteriors and summed event counts for a batch."""
    n_sent = offsets.shape[0] - 1
    K = scores.shape[1]
    log_z = np.empty(n_sent)
    tag_post = np.empty(scores.shape)
    c_root = np.zeros(K)
    c_att = np.zeros((K, 2, K))
    c_stop = np.zeros((K, 2, 2))
    c_cont = np.zeros((K, 2, 2))
    for s in range(n_sent):
        a, b = offsets[s], offsets[s + 1]
        lz, tp, cr, ca, cs, cc = _outside(log_root, log_att, log_stop, log_cont, scores[a:b])
        log_z[s] = lz
        tag_post[a:b] = tp
        c_root += cr
        c_att += ca
        c_stop += cs
        c_cont += cc
    return log_z, tag_post, c_root, c_att, c_stop, c_cont


@jit
def dmv_log_z_kernel(log_root, log_att, log_stop, log_cont, scores, offsets):
    n_sent = offsets.shape[0] - 1
    out = np.empty(n_sent)
    for s in range(n_sent):
        out[s] = _inside(log_root, log_att, log_stop, log_cont, scores[offsets[s]:offsets[s + 1]])[7]
    return out


# relative margin a candidate must win by; float noise from summation order
# must not decide between derivations that tie exactly in real arithmetic
TIE_TOL = 1e-12


@jit
def _beats(value, best):
    if best == NEG_INF:
        return value > best
    return value > best + TIE_TOL * (1.0 + abs(best))


@jit
def _beats_all(values, best):
    out = np.empty(values.shape, dtype=np.bool_)
    for a in range(values.shape[0]):
        for b in range(values.shape[1]):
            out[a, b] = _beats(values[a, b], best[a, b])
    return out


@jit
def _viterbi_chart(log_root, log_att, log_stop, log_cont, scores):
    n, K = scores.shape
    CL = np.full((n, n, K), NEG_INF)
    CR = np.full((n, n, K), NEG_INF)
    SL = np.full((n, n, K), NEG_INF)
    SR = np.full((n, n, K), NEG_INF)
    IL = np.full((n, n, K, K), NEG_INF)
    IR = np.full((n, n, K, K), NEG_INF)
    bIL = np.zeros((n, n, K, K), dtype=np.int64)
    bIR = np.zeros((n, n, K, K), dtype=np.int64)
    bCL = np.zeros((n, n, K, 2), dtype=np.int64)
    bCR = np.zeros((n, n, K, 2), dtype=np.int64)
    att_l = log_att[:, LEFT, :]
    att_r = log_att[:, RIGHT, :]
    for i in range(n):
        CL[i, i] = scores[i]
        CR[i, i] = 0.0
        SL[i, i] = scores[i] + log_stop[:, LEFT, ADJ]
        SR[i, i] = log_stop[:, RIGHT, ADJ]
    for w in range(1, n):
        for i in range(n - w):
            j = i + w
            best_r = np.full((K, K), NEG_INF)
            best_l = np.full((K, K), NEG_INF)
            arg_r = np.full((K, K), i)
            arg_l = np.full((K, K), i)
            for k in range(i, j):
                v = ADJ if k == i else NONADJ
                term = (CR[i, k] + log_cont[:, RIGHT, v])[:, None] + att_r + SL[k + 1, j][None, :]
                upd = _beats_all(term, best_r)
                best_r = np.where(upd, term, best_r)
                arg_r = np.where(upd, k, arg_r)
                v = ADJ if k + 1 == j else NONADJ
                term = (CL[k + 1, j] + log_cont[:, LEFT, v])[:, None] + att_l + SR[i, k][None, :]
                upd = _beats_all(term, best_l)
                best_l = np.where(upd, term, best_l)
                arg_l = np.where(upd, k, arg_l)
            IR[i, j] = best_r
            IL[i, j] = best_l
            bIR[i, j] = arg_r
            bIL[i, j] = arg_l

            best = np.full(K, NEG_INF)
            for m in range(i + 1, j + 1):
                cand = IR[i, m] + SR[m, j][None, :]
                for a in range(K):
                    for b in range(K):
                        if _beats(cand[a, b], best[a]):
                            best[a] = cand[a, b]
                            bCR[i, j, a, 0] = m
                            bCR[i, j, a, 1] = b
            CR[i, j] = best
            best = np.full(K, NEG_INF)
            for m in range(i, j):
                cand = IL[m, j] + SL[i, m][None, :]
                for a in range(K):
                    for b in range(K):
                        if _beats(cand[a, b], best[a]):
                            best[a] = cand[a, b]
                            bCL[i, j, a, 0] = m
                            bCL[i, j, a, 1] = b
            CL[i, j] = best
            SL[i, j] = CL[i, j] + log_stop[:, LEFT, NONADJ]
            SR[i, j] = CR[i, j] + log_stop[:, RIGHT, NONADJ]

    best = NEG_INF
    root_h = 0
    root_a = 0
    for h in range(n):
        for a in range(K):
            t = log_root[a] + SL[0, h, a] + SR[h, n - 1, a]
            if _beats(t, best):
                best = t
                root_h = h
                root_a = a
    return best, root_h, root_a, bIL, bIR, bCL, bCR


def _backtrack(n, root_h, root_a, bIL, bIR, bCL, bCR):
    heads = [0] * n
    tags = [0] * n
    heads[root_h] = -1
    tags[root_h] = root_a
    stack = [("L", 0, root_h, root_a), ("R", root_h, n - 1, root_a)]
    while stack:
        kind, i, j, a = stack.pop()
        if kind == "L":  # complete left half of head j
            if i == j:
                continue
            m, b = bCL[i, j, a]
            heads[m] = j
            tags[m] = b
            k = bIL[m, j, a, b]
            stack += [("L", i, m, b), ("R", m, k, b), ("L", k + 1, j, a)]
        else:  # complete right half of head i
            if i == j:
                continue
            m, b = bCR[i, j, a]
            heads[m] = i
            tags[m] = b
            k = bIR[i, m, a, b]
            stack += [("R", m, j, b), ("R", i, k, a), ("L", k + 1, m, b)]
    return [int(h) + 1 for h in heads], [int(t) for t in tags]


def _check(params, scores):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise ValueError("empty sentence")
    if scores.shape[1] != params.K:
        raise ValueError(f"scores must have {params.K} columns, got {scores.shape[1]}")
    return scores


def dmv_log_marginal(params, scores):
    scores = _check(params, scores)
    return float(_inside(*_tables(params), scores)[7])


def expected_counts(params, scores):
    """Raw posterior event counts: ``(log_z, tag_post, root, attach, stop, continue)``."""
    scores = _check(params, scores)
    return _outside(*_tables(params), scores)


def logit_grads(params, c_root, c_att, c_stop, c_cont):
    """Chain expected event counts through softmax / sigmoid."""
    g_root = c_root - c_root.sum() * np.exp(params.log_root())
    g_att = c_att - c_att.sum(axis=2, keepdims=True) * np.exp(params.log_attach())
    p_stop = np.exp(params.log_stop())
    g_stop = c_stop * (1.0 - p_stop) - c_cont * p_stop
    return g_root, g_att, g_stop


def dmv_expected_counts(params, scores):
    """Gradients of the log marginal.

    Returns ``(grad_root, grad_attach, grad_stop, grad_scores, log_marginal)``;
    ``grad_scores`` holds the per-token tag posteriors.
    """
    log_z, tag_post, c_root, c_att, c_stop, c_cont = expected_counts(params, scores)
    g_root, g_att, g_stop = logit_grads(params, c_root, c_att, c_stop, c_cont)
    return g_root, g_att, g_stop, tag_post, float(log_z)


def dmv_viterbi(params, scores, return_score=False):
    """Highest-scoring (tree, tagging).

    Ties prefer the smaller head index, then the smaller tag index.
    """
    scores = _check(params, scores)
    best, root_h, root_a, bIL, bIR, bCL, bCR = _viterbi_chart(*_tables(params), scores)
    if best == -np.inf:
        raise ValueError("sentence has no derivation with non-zero probability")
    heads, tags = _backtrack(scores.shape[0], root_h, root_a, bIL, bIR, bCL, bCR)
    parse = DependencyParse(heads, tags)
    return (parse, float(best)) if return_score else parse


def derivation_events(heads, tags):
    """Event counts of one (tree, tagging) under the generative story.

    ``heads`` are 1-based with 0 for the root.
    """
    n = len(heads)
    K = max(tags) + 1
    c_root = np.zeros(K)
    c_att = np.zeros((K, 2, K))
    c_stop = np.zeros((K, 2, 2))
    c_cont = np.zeros((K, 2, 2))
    children = [[] for _ in range(n)]
    for i, h in enumerate(heads):
        if h == 0:
            c_root[tags[i]] += 1
        else:
            children[h - 1].append(i)
    for h in range(n):
        a = tags[h]
        for d, kids in ((LEFT, [c for c in children[h] if c < h]), (RIGHT, [c for c in children[h] if c > h])):
            v = ADJ
            for c in kids:
                c_cont[a, d, v] += 1
                c_att[a, d, tags[c]] += 1
                v = NONADJ
            c_stop[a, d, v] += 1
    return c_root, c_att, c_stop, c_cont


def _pad_counts(counts, K):
    c_root, c_att, c_stop, c_cont = counts
    k = c_root.shape[0]
    out = [np.zeros(K), np.zeros((K, 2, K)), np.zeros((K, 2, 2)), np.zeros((K, 2, 2))]
    out[0][:k] = c_root
    out[1][:k, :, :k] = c_att
    out[2][:k] = c_stop
    out[3][:k] = c_cont
    return out


def derivation_log_prob(params, heads, tags):
    c_root, c_att, c_stop, c_cont = _pad_counts(derivation_events(heads, tags), params.K)
    return float(
        (c_root * params.log_root()).sum()
        + (c_att * params.log_attach()).sum()
        + (c_stop * params.log_stop()).sum()
        + (c_cont * params.log_continue()).sum()
    )


def observed_tag_scores(tags, K):
    scores = np.full((len(tags), K), -np.inf)
    scores[np.arange(len(tags)), tags] = 0.0
    return scores


def params_from_counts(c_root, c_att, c_stop, c_cont, smoothing):
    """Additively smoothed relative frequencies, returned as logits."""
    root = np.log(c_root + smoothing)
    att = np.log(c_att + smoothing)
    stop = np.log(c_stop + smoothing) - np.log(c_cont + smoothing)
    K = c_root.shape[0]
    return DmvParams(root - logsumexp_vec(root), att - logsumexp_rows(att.reshape(-1, K)).reshape(K, 2, 1), stop)


def train_dmv_viterbi_em(tag_sequences, K, iterations, smoothing=1.0, init=None, trace=None):
    """Hard EM for a DMV over observed tags.

    Starts from ``init`` (uniform when omitted). Each iteration parses every
    sequence with the current model, then re-estimates the multinomials from
    the parse counts with additive ``smoothing``. When ``trace`` is a list,
    the total Viterbi log score of each iteration's parses is appended.
    """
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    seqs = [np.asarray(t, dtype=np.int64) for t in tag_sequences]
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ValueError("tag corpus must contain non-empty sequences")
    top = max(int(s.max()) for s in seqs)
    if top >= K or min(int(s.min()) for s in seqs) < 0:
        raise ValueError(f"tag index {top} outside [0, {K})")
    params = uniform_dmv(K) if init is None else init.copy()
    for _ in range(iterations):
        totals = [np.zeros(K), np.zeros((K, 2, K)), np.zeros((K, 2, 2)), np.zeros((K, 2, 2))]
        score = 0.0
        for tags in seqs:
            parse, s = dmv_viterbi(params, observed_tag_scores(tags, K), return_score=True)
            score += s
            for tot, c in zip(totals, _pad_counts(derivation_events(parse.heads, list(tags)), K)):
                tot += c
        if trace is not None:
            trace.append(score)
        params = params_from_counts(*totals, smoothing)
    return params


def dmv_to_dict(params):
    return {n: p.tolist() for n, p in zip(("root_logits", "attach_logits", "stop_logits"), params.params())}


def dmv_from_dict(d):
    return DmvParams(*(np.asarray(d[n], dtype=np.float64) for n in ("root_logits", "attach_logits", "stop_logits")))
