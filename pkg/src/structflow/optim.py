"""Adam, multi-restart training, staged pre-training and checkpoints."""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dmv, markov
from .flow import flow_from_dict, flow_to_dict, init_flow, inverse_apply
from .joint import (
    DMV,
    MARKOV,
    VARIANCE_FLOOR,
    GaussianEmissions,
    JointModel,
    batch_gradients,
    corpus_log_likelihood,
    emission_log_scores,
    init_emissions,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "structflow-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state, params, grads):
    """One bias-corrected Adam *ascent* step, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p += state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    structure: str = MARKOV
    K: int = 45
    depth: int = 8
    epochs: int = 50
    restarts: int = 10
    batch_size: int = 32
    seed: int = 0
    learning_rate: float = 1e-3
    fixed_variance: bool = True
    mean_noise: float = 0.1
    flow_init_scale: float = 1.0
    max_len: Optional[int] = None
    strip_punct: bool = False
    convergence_tol: Optional[float] = None
    viterbi_em_iterations: int = 10
    viterbi_em_smoothing: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if self.structure not in (MARKOV, DMV):
            raise ValueError(f"structure must be {MARKOV!r} or {DMV!r}")
        for name in ("K", "restarts", "batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("depth", "epochs", "viterbi_em_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def tol(self):
        """Relative per-epoch LL improvement below which training stops early."""
        if self.convergence_tol is not None:
            return self.convergence_tol
        return 1e-5 if self.structure == DMV else None

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    model: JointModel
    config: TrainConfig
    log_likelihood: float
    seed: int


def random_model(corpus, config, seed):
    x = np.concatenate([s.embeddings for s in corpus])
    flow = init_flow(corpus.dim, config.depth, seed, config.flow_init_scale)
    latents, _ = inverse_apply(flow, x)
    em = init_emissions(config.K, latents, seed, config.mean_noise, not config.fixed_variance)
    if config.structure == MARKOV:
        syntax = markov.init_markov(config.K, seed)
    else:
        syntax = dmv.init_dmv(config.K, seed)
    return JointModel(flow, em, syntax)


def _model_from_init(init, corpus, config, seed):
    if init.structure != config.structure:
        raise ValueError(f"initial model is {init.structure}, config asks for {config.structure}")
    if init.K != config.K or init.dim != corpus.dim:
        raise ValueError("initial model does not match K or embedding dimension")
    if init.flow.depth == config.depth:
        flow = init.flow.copy()
    else:
        flow = init_flow(corpus.dim, config.depth, seed, config.flow_init_scale)
    em = GaussianEmissions(init.emissions.means.copy(), init.emissions.variances.copy(), not config.fixed_variance)
    return JointModel(flow, em, init.syntax.copy())


def gradient(model, sentences, workers=1):
    """Batch gradient; with ``workers > 1`` chunks run in threads and are summed in order."""
    if workers <= 1 or len(sentences) < 2 * workers:
        return batch_gradients(model, sentences)
    chunks = np.array_split(np.arange(len(sentences)), workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda idx: batch_gradients(model, [sentences[i] for i in idx]), chunks))
    total = parts[0]
    for p in parts[1:]:
        total += p
    return total


def _train_one(model, sentences, config, rng, record):
    state = AdamState(lr=config.learning_rate)
    params = model.params()
    n = len(sentences)
    prev = corpus_log_likelihood(model, sentences)
    epoch_lls = [prev]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = [sentences[i] for i in order[start:start + config.batch_size]]
            g = gradient(model, batch, config.workers)
            if not math.isfinite(g.log_likelihood):
                raise FloatingPointError("non-finite batch log likelihood")
            glist = g.as_list()
            adam_step(state, params, glist)
            if model.emissions.trainable_variance:
                np.maximum(model.emissions.variances, VARIANCE_FLOOR, out=model.emissions.variances)
            gnorm = math.sqrt(sum(float((a * a).sum()) for a in glist))
            record({"epoch": epoch, "batch": b, "ll": g.log_likelihood, "grad_norm": gnorm})
        ll = corpus_log_likelihood(model, sentences)
        if not math.isfinite(ll):
            raise FloatingPointError("non-finite corpus log likelihood")
        epoch_lls.append(ll)
        record({"epoch": epoch, "batch": None, "ll": ll, "grad_norm": None})
        tol = config.tol
        if tol is not None and abs(ll - prev) <= tol * abs(prev):
            break
        prev = ll
    return epoch_lls


def train(corpus, config, init=None, log_file=None, stage="train"):
    """Run ``config.restarts`` independent runs and keep the best by training LL.

    Restart ``r`` is seeded with ``config.seed + r``. When ``init`` (a
    ``JointModel``) is given, every restart starts from its emissions and
    syntax parameters; the flow is reused if its depth matches, otherwise it is
    freshly initialised. Returns ``(best_checkpoint, trace)``.
    """
    sentences = list(corpus)
    trace = []
    best = None
    for r in range(config.restarts):
        seed = config.seed + r
        rng = np.random.default_rng(seed)

        def record(rec, r=r):
            rec = {"stage": stage, "restart": r, **rec}
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            if rec["batch"] is None:
                log.info("%s restart %d epoch %d ll %.6f", stage, r, rec["epoch"], rec["ll"])

        model = random_model(corpus, config, seed) if init is None else _model_from_init(init, corpus, config, seed)
        entry = {"restart": r, "seed": seed, "status": "ok"}
        try:
            entry["epoch_ll"] = _train_one(model, sentences, config, rng, record)
            entry["init_ll"] = entry["epoch_ll"][0]
            entry["final_ll"] = corpus_log_likelihood(model, sentences)
            if not math.isfinite(entry["final_ll"]):
                raise FloatingPointError("non-finite final log likelihood")
        except FloatingPointError as exc:
            log.warning("%s restart %d failed: %s", stage, r, exc)
            entry.update(status="failed", error=str(exc), final_ll=None)
            trace.append(entry)
            continue
        trace.append(entry)
        if best is None or entry["final_ll"] > best.log_likelihood:
            best = Checkpoint(model, config, entry["final_ll"], seed)
    if best is None:
        raise RuntimeError("every restart failed")
    return best, trace


def induce_tags(model, corpus):
    """Viterbi tag sequence of each sentence under a Markov model."""
    if model.structure != MARKOV:
        raise ValueError("tag induction needs a Markov-structured model")
    return [markov.viterbi(model.syntax, emission_log_scores(model, s)[0]) for s in corpus]


def parse_corpus(model, corpus):
    if model.structure != DMV:
        raise ValueError("parsing needs a DMV-structured model")
    return [dmv.dmv_viterbi(model.syntax, emission_log_scores(model, s)[0]) for s in corpus]


def pretrain_pipeline(corpus, config, log_file=None, with_viterbi_em=True):
    """Staged training: depth-0 Gaussian model first, then the full-depth model.

    For DMV, a Gaussian HMM is trained first; its Viterbi tags feed discrete
    Viterbi EM, whose multinomials and the HMM's Gaussians initialise the
    Gaussian DMV. Returns ``(checkpoint, stages)`` where ``stages`` maps stage
    names to their restart traces.
    """
    stages = {}
    shallow = replace(config, depth=0)
    init = None
    if config.structure == DMV:
        hmm_cfg = replace(shallow, structure=MARKOV, convergence_tol=None)
        hmm, stages["gaussian_hmm"] = train(corpus, hmm_cfg, log_file=log_file, stage="gaussian_hmm")
        syntax = dmv.init_dmv(config.K, config.seed)
        if with_viterbi_em:
            tags = induce_tags(hmm.model, corpus)
            em_trace = []
            syntax = dmv.train_dmv_viterbi_em(
                tags, config.K, config.viterbi_em_iterations, config.viterbi_em_smoothing, trace=em_trace
            )
            stages["viterbi_em"] = em_trace
        init = JointModel(hmm.model.flow, hmm.model.emissions, syntax)
    first, stages["depth0"] = train(corpus, shallow, init=init, log_file=log_file, stage="depth0")
    if config.depth == 0:
        return Checkpoint(first.model, config, first.log_likelihood, first.seed), stages
    second, stages["full"] = train(corpus, config, init=first.model, log_file=log_file, stage="full")
    return second, stages


def model_to_dict(model):
    em = model.emissions
    syntax = (
        {"init_logits": model.syntax.init_logits.tolist(), "trans_logits": model.syntax.trans_logits.tolist()}
        if model.structure == MARKOV
        else dmv.dmv_to_dict(model.syntax)
    )
    return {
        "structure": model.structure,
        "flow": flow_to_dict(model.flow),
        "emissions": {
            "means": em.means.tolist(),
            "variances": em.variances.tolist(),
            "trainable_variance": em.trainable_variance,
        },
        "syntax": syntax,
    }


def model_from_dict(d):
    em = d["emissions"]
    emissions = GaussianEmissions(np.array(em["means"], dtype=float), np.array(em["variances"], dtype=float),
                                  bool(em["trainable_variance"]))
    s = d["syntax"]
    if d["structure"] == MARKOV:
        syntax = markov.MarkovParams(np.array(s["init_logits"], dtype=float), np.array(s["trans_logits"], dtype=float))
    elif d["structure"] == DMV:
        syntax = dmv.dmv_from_dict(s)
    else:
        raise CheckpointError(f"unknown structure {d['structure']!r}")
    return JointModel(flow_from_dict(d["flow"]), emissions, syntax)


def save_checkpoint(ckpt, path):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "log_likelihood": ckpt.log_likelihood,
        "seed": ckpt.seed,
        "model": model_to_dict(ckpt.model),
    }
    # json writes floats with repr, which round-trips doubles exactly
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path, expected_structure=None):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    try:
        model = model_from_dict(doc["model"])
        config = TrainConfig.from_dict(doc["config"])
        ckpt = Checkpoint(model, config, float(doc["log_likelihood"]), int(doc["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: schema violation ({exc})") from None
    if expected_structure is not None and model.structure != expected_structure:
        raise CheckpointError(f"{path}: checkpoint holds a {model.structure} model, expected {expected_structure}")
    return ckpt
