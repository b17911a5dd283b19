"""Time the inference kernels with numba on and off.

Each backend runs in its own interpreter because the switch is read at
import time::

    python3 benchmarks/bench_kernels.py --sentences 200 --repeat 3
"""
import argparse
import json
import os
import subprocess
import sys
import time

CHILD = r"""
import json, sys, time
import numpy as np
from structflow import _accel, dmv, markov
from structflow.joint import batch_gradients
from structflow.synthetic import planted_model
from structflow.joint import sample_corpus

n_sent, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)

def timed(fn):
    fn()  # warm-up, includes compilation
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best

out = {"numba": _accel.USE_NUMBA}
K = 10
lengths = rng.integers(5, 21, size=n_sent)
offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
scores = rng.normal(size=(offsets[-1], K))
mp = markov.init_markov(K, 0)
out["markov_fb"] = timed(lambda: markov.markov_batch_kernel(mp.log_init(), mp.log_trans(), scores, offsets))
dp = dmv.init_dmv(K, 0)
tables = dmv._tables(dp)
out["dmv_inside_outside"] = timed(lambda: dmv.dmv_batch_kernel(*tables, scores, offsets))
sents = [scores[offsets[i]:offsets[i + 1]] for i in range(min(n_sent, 50))]
out["dmv_viterbi"] = timed(lambda: [dmv.dmv_viterbi(dp, s) for s in sents])
model = planted_model({"structure": "markov", "K": K, "dim": 20, "depth": 4, "seed": 1})
corpus = list(sample_corpus(model, n_sent, (5, 20), seed=2))
out["joint_gradient"] = timed(lambda: batch_gradients(model, corpus))
print(json.dumps(out))
"""


def run_backend(disable, sentences, repeat):
    env = dict(os.environ)
    env.pop("STRUCTFLOW_DISABLE_NUMBA", None)
    if disable:
        env["STRUCTFLOW_DISABLE_NUMBA"] = "1"
    res = subprocess.run(
        [sys.executable, "-c", CHILD, str(sentences), str(repeat)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sentences", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    t0 = time.perf_counter()
    fast = run_backend(False, args.sentences, args.repeat)
    slow = run_backend(True, args.sentences, args.repeat)
    print(f"{'kernel':<22}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
    for key in fast:
        if key == "numba":
            continue
        print(f"{key:<22}{fast[key]:>12.4f}{slow[key]:>12.4f}{slow[key] / fast[key]:>9.1f}x")
    print(f"total wall time {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
