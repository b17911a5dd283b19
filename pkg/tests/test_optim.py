import json
from dataclasses import replace

import numpy as np
import pytest

from structflow import optim
from structflow.joint import corpus_log_likelihood, sample_corpus
from structflow.optim import (
    AdamState,
    CheckpointError,
    TrainConfig,
    adam_step,
    load_checkpoint,
    pretrain_pipeline,
    random_model,
    save_checkpoint,
    train,
)
from structflow.synthetic import planted_model


def toy_corpus(structure="markov", n=40, seed=0, K=2, depth=0):
    spec = {"structure": structure, "K": K, "dim": 4, "depth": depth, "separation": 8.0, "seed": seed}
    return sample_corpus(planted_model(spec), n, (2, 6), seed=seed)


def test_adam_zero_gradient_is_a_no_op():
    p = [np.array([1.0, -2.0])]
    adam_step(AdamState(lr=0.1), p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_and_sign():
    p = [np.zeros(1)]
    state = AdamState(lr=0.1)
    adam_step(state, p, [np.ones(1)])
    assert state.t == 1
    assert p[0][0] == pytest.approx(0.1 / (1 + 1e-8), abs=1e-15)
    q = [np.zeros(3)]
    state = AdamState(lr=0.01)
    g = np.array([2.0, -0.5, 1e-3])
    for _ in range(100):
        before = q[0].copy()
        adam_step(state, q, [g])
        assert np.array_equal(np.sign(q[0] - before), np.sign(g))


def test_adam_errors():
    with pytest.raises(FloatingPointError):
        adam_step(AdamState(), [np.zeros(2)], [np.array([1.0, np.nan])])
    with pytest.raises(ValueError):
        adam_step(AdamState(), [np.zeros(2)], [np.zeros(3)])
    with pytest.raises(ValueError):
        adam_step(AdamState(), [np.zeros(2)], [])


def test_config_validation():
    assert TrainConfig().K == 45 and TrainConfig().restarts == 10 and TrainConfig().epochs == 50
    assert TrainConfig(structure="dmv").tol == 1e-5 and TrainConfig().tol is None
    for bad in ({"structure": "crf"}, {"K": 0}, {"restarts": 0}, {"depth": -1}, {"learning_rate": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"K": 3, "colour": "red"})


def test_zero_epochs_returns_initialisation():
    corpus = toy_corpus()
    cfg = TrainConfig(K=2, depth=2, epochs=0, restarts=1, seed=5)
    best, trace = train(corpus, cfg)
    init = random_model(corpus, cfg, 5)
    assert best.log_likelihood == corpus_log_likelihood(init, corpus)
    assert all(np.array_equal(a, b) for a, b in zip(best.model.params(), init.params()))
    assert trace[0]["init_ll"] == trace[0]["final_ll"]


def test_training_improves_likelihood():
    corpus = toy_corpus()
    best, trace = train(corpus, TrainConfig(K=2, depth=0, epochs=5, restarts=1, learning_rate=0.05))
    assert trace[0]["final_ll"] >= trace[0]["init_ll"]
    assert len(trace[0]["epoch_ll"]) == 6


def test_selection_takes_maximum_and_logs(tmp_path):
    corpus = toy_corpus()
    log_path = tmp_path / "log.jsonl"
    with open(log_path, "w") as f:
        best, trace = train(corpus, TrainConfig(K=2, depth=1, epochs=2, restarts=3, learning_rate=0.02), log_file=f)
    finals = [e["final_ll"] for e in trace]
    assert len(set(finals)) == 3
    assert best.log_likelihood == max(finals)
    assert best.seed == trace[int(np.argmax(finals))]["seed"]
    assert [e["seed"] for e in trace] == [0, 1, 2]
    records = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert {"epoch", "batch", "ll", "grad_norm", "restart"} <= set(records[0])
    assert any(r["batch"] is None for r in records)


def test_failed_restart_is_recorded_and_skipped(monkeypatch):
    corpus = toy_corpus()
    real = optim._train_one
    calls = {"n": 0}

    def flaky(model, sentences, config, rng, record):
        calls["n"] += 1
        if calls["n"] == 2:
            raise FloatingPointError("non-finite batch log likelihood")
        return real(model, sentences, config, rng, record)

    monkeypatch.setattr(optim, "_train_one", flaky)
    best, trace = train(corpus, TrainConfig(K=2, depth=0, epochs=1, restarts=3))
    assert [e["status"] for e in trace] == ["ok", "failed", "ok"]
    assert best.log_likelihood == max(e["final_ll"] for e in trace if e["status"] == "ok")

    def broken(*args):
        raise FloatingPointError("boom")

    monkeypatch.setattr(optim, "_train_one", broken)
    with pytest.raises(RuntimeError):
        train(corpus, TrainConfig(K=2, depth=0, epochs=1, restarts=2))


def batch_lls(corpus, cfg):
    import io

    buf = io.StringIO()
    best, _ = train(corpus, cfg, log_file=buf)
    return [json.loads(l)["ll"] for l in buf.getvalue().splitlines()], best


def test_determinism_and_threaded_reduction():
    corpus = toy_corpus(n=60)
    cfg = TrainConfig(K=2, depth=2, epochs=2, restarts=1, batch_size=16, learning_rate=0.01)
    a, best_a = batch_lls(corpus, cfg)
    b, _ = batch_lls(corpus, cfg)
    assert a == b
    _, best_c = batch_lls(corpus, replace(cfg, workers=3))
    assert abs(best_c.log_likelihood - best_a.log_likelihood) <= 1e-8


def test_dmv_convergence_stop():
    corpus = toy_corpus("dmv", n=30)
    cfg = TrainConfig(structure="dmv", K=2, depth=0, epochs=200, restarts=1, convergence_tol=1e-3, learning_rate=0.05)
    _, trace = train(corpus, cfg)
    assert len(trace[0]["epoch_ll"]) < 201


def test_pretrain_stage_two_starts_near_stage_one():
    corpus = toy_corpus(n=40)
    deltas = []
    for scale in (1e-4, 1e-5):
        cfg = TrainConfig(K=2, depth=4, epochs=0, restarts=1, flow_init_scale=scale)
        shallow = replace(cfg, epochs=3, depth=0)
        first, _ = train(corpus, shallow)
        _, stages = pretrain_pipeline(corpus, replace(cfg, epochs=3, restarts=1))
        full = stages["full"][0]
        deltas.append(abs(full["init_ll"] - stages["depth0"][0]["final_ll"]))
        assert stages["depth0"][0]["final_ll"] == first.log_likelihood
    # the gap shrinks at least linearly with the initial weight scale
    assert deltas[1] < 1e-6
    assert deltas[0] / deltas[1] > 5


def test_pretrain_depth_zero_single_stage():
    corpus = toy_corpus(n=30)
    cfg = TrainConfig(K=2, depth=0, epochs=2, restarts=2)
    ckpt, stages = pretrain_pipeline(corpus, cfg)
    direct, _ = train(corpus, cfg)
    assert list(stages) == ["depth0"] and ckpt.log_likelihood == direct.log_likelihood


@pytest.mark.slow
def test_dmv_pipeline_beats_random_initialisation():
    wins = 0
    for seed in range(5):
        corpus = toy_corpus("dmv", n=80, seed=seed)
        cfg = TrainConfig(structure="dmv", K=2, depth=0, epochs=4, restarts=1, seed=seed, learning_rate=0.05)
        piped, stages = pretrain_pipeline(corpus, cfg)
        assert set(stages) == {"gaussian_hmm", "viterbi_em", "depth0"}
        scratch, _ = train(corpus, cfg)
        wins += piped.log_likelihood > scratch.log_likelihood
    assert wins >= 4


@pytest.mark.parametrize("structure", ["markov", "dmv"])
def test_checkpoint_round_trip(tmp_path, structure):
    corpus = toy_corpus(structure, n=10)
    cfg = TrainConfig(structure=structure, K=2, depth=3, epochs=1, restarts=1, fixed_variance=False)
    best, _ = train(corpus, cfg)
    path = tmp_path / "c.json"
    save_checkpoint(best, path)
    back = load_checkpoint(path, expected_structure=structure)
    assert back.config == best.config and back.seed == best.seed
    assert back.model.emissions.trainable_variance
    assert abs(corpus_log_likelihood(back.model, corpus) - corpus_log_likelihood(best.model, corpus)) <= 1e-12
    assert back.log_likelihood == best.log_likelihood


def test_checkpoint_errors(tmp_path):
    corpus = toy_corpus(n=10)
    best, _ = train(corpus, TrainConfig(K=2, depth=1, epochs=0, restarts=1))
    path = tmp_path / "c.json"
    save_checkpoint(best, path)
    text = path.read_text()
    (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.json")
    doc = json.loads(text)
    doc["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.json")
    doc = json.loads(text)
    del doc["model"]["emissions"]
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="schema"):
        load_checkpoint(tmp_path / "s.json")
    with pytest.raises(CheckpointError, match="expected dmv"):
        load_checkpoint(path, expected_structure="dmv")
    with pytest.raises(ValueError):
        optim.parse_corpus(best.model, corpus)


def test_init_from_model_checks_compatibility():
    corpus = toy_corpus(n=10)
    best, _ = train(corpus, TrainConfig(K=2, depth=0, epochs=0, restarts=1))
    with pytest.raises(ValueError):
        train(corpus, TrainConfig(K=3, depth=0, epochs=0, restarts=1), init=best.model)
    with pytest.raises(ValueError):
        train(corpus, TrainConfig(structure="dmv", K=2, depth=0, epochs=0, restarts=1), init=best.model)
