"""Unsupervised tagging and parsing metrics.

Entropies are in nats. Tables are indexed ``counts[pred, gold]``.
"""
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray
    pred_labels: tuple = None
    gold_labels: tuple = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or np.any(c < 0):
            raise ValueError("contingency counts must be a non-negative matrix")
        if c.sum() <= 0:
            raise ValueError("contingency table is empty (N = 0)")
        object.__setattr__(self, "counts", c)
        if self.pred_labels is None:
            object.__setattr__(self, "pred_labels", tuple(range(c.shape[0])))
        if self.gold_labels is None:
            object.__setattr__(self, "gold_labels", tuple(range(c.shape[1])))

    @property
    def total(self):
        return self.counts.sum()


def _sort_key(label):
    return (0, int(label), "") if str(label).lstrip("-").isdigit() else (1, 0, str(label))


def contingency(pred, gold):
    """Build a table from two parallel flat label sequences."""
    pred = list(pred)
    gold = list(gold)
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted labels but {len(gold)} gold labels")
    p_labels = tuple(sorted(set(pred), key=_sort_key))
    g_labels = tuple(sorted(set(gold), key=_sort_key))
    p_idx = {l: i for i, l in enumerate(p_labels)}
    g_idx = {l: i for i, l in enumerate(g_labels)}
    counts = np.zeros((len(p_labels), len(g_labels)), dtype=np.int64)
    np.add.at(counts, ([p_idx[l] for l in pred], [g_idx[l] for l in gold]), 1)
    return ContingencyTable(counts, p_labels, g_labels)


def many_to_one_map(table):
    """Each predicted cluster to its majority gold column (lowest index on ties)."""
    return {p: int(np.argmax(row)) for p, row in enumerate(table.counts)}


def many_to_one(table):
    return float(table.counts.max(axis=1).sum() / table.total)


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def v_measure(table):
    """Return ``(vm, homogeneity, completeness)``."""
    c = table.counts.astype(np.float64)
    n = c.sum()
    joint = c / n
    p_pred = joint.sum(axis=1)
    p_gold = joint.sum(axis=0)
    h_gold = _entropy(p_gold)
    h_pred = _entropy(p_pred)
    h_joint = _entropy(joint.ravel())
    h_gold_given_pred = h_joint - h_pred
    h_pred_given_gold = h_joint - h_gold
    hom = 1.0 if h_gold == 0 else 1.0 - h_gold_given_pred / h_gold
    com = 1.0 if h_pred == 0 else 1.0 - h_pred_given_gold / h_pred
    vm = 0.0 if hom + com == 0 else 2.0 * hom * com / (hom + com)
    return vm, hom, com


def one_to_one_map(table):
    """Optimal injective pred -> gold mapping; unmatched clusters map to None."""
    rows, cols = linear_sum_assignment(table.counts, maximize=True)
    mapping = {p: None for p in range(table.counts.shape[0])}
    for r, c in zip(rows, cols):
        mapping[int(r)] = int(c)
    return mapping


def one_to_one_accuracy(table, mapping=None):
    mapping = one_to_one_map(table) if mapping is None else mapping
    hit = sum(table.counts[p, g] for p, g in mapping.items() if g is not None)
    return float(hit / table.total)


def confusion_matrix(table, mapping=None, gold_subset=None):
    """Row-normalised confusion of gold tags (rows) against mapped clusters (columns).

    Columns are labelled by the gold tag each cluster maps to under the
    one-to-one mapping. Returns ``(labels, matrix)``.
    """
    mapping = one_to_one_map(table) if mapping is None else mapping
    if gold_subset is None:
        cols = list(range(len(table.gold_labels)))
    else:
        index = {l: i for i, l in enumerate(table.gold_labels)}
        cols = [index[l] for l in gold_subset if l in index]
    inverse = {g: p for p, g in mapping.items() if g is not None}
    row_totals = table.counts.sum(axis=0)
    m = np.zeros((len(cols), len(cols)))
    for r, g in enumerate(cols):
        if row_totals[g] == 0:
            continue
        for c, g2 in enumerate(cols):
            p = inverse.get(g2)
            if p is not None:
                m[r, c] = table.counts[p, g] / row_totals[g]
    return [table.gold_labels[g] for g in cols], m


def directed_accuracy(pred_heads, gold_heads):
    """Fraction of tokens whose predicted head equals the gold head."""
    pred_heads = list(pred_heads)
    gold_heads = list(gold_heads)
    if len(pred_heads) != len(gold_heads):
        raise ValueError(f"{len(pred_heads)} predicted sentences but {len(gold_heads)} gold")
    hit = total = 0
    for s, (p, g) in enumerate(zip(pred_heads, gold_heads)):
        if len(p) != len(g):
            raise ValueError(f"sentence {s + 1}: length {len(p)} vs gold {len(g)}")
        hit += sum(int(a) == int(b) for a, b in zip(p, g))
        total += len(g)
    if total == 0:
        raise ValueError("no tokens to evaluate")
    return hit / total
