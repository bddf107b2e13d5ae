"""Forward-pass latency of the index networks, single UE and per-TTI batch."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .env import SERVICE_CLASSES, UEState
from .net import WhittleNetwork


def _percentiles(samples_s) -> dict:
    us = np.asarray(samples_s) * 1e6
    return {"p50_us": float(np.percentile(us, 50)), "p90_us": float(np.percentile(us, 90)),
            "p99_us": float(np.percentile(us, 99)), "max_us": float(us.max())}


def random_states(rng: np.random.Generator, n: int) -> list[UEState]:
    return [UEState(int(rng.integers(0, 50_000)), int(rng.integers(1, 16)), int(rng.integers(0, 30)),
                    float(rng.random()), float(rng.random())) for _ in range(n)]


def bench_inference(n_ues: int = 20, threads: int = 2, repeats: int = 2000, seed: int = 0,
                    warmup: int = 50) -> dict:
    """Latency percentiles in microseconds.

    ``single``: one ``forward`` call.  ``batch``: indices of all ``n_ues`` UEs
    (each with its class's network), split into ``threads`` chunks evaluated
    on a persistent thread pool; inside a chunk, UEs sharing a network go
    through one ``forward_batch`` call.
    """
    if n_ues < 1 or threads < 1 or repeats < 1:
        raise ValueError("n_ues, threads and repeats must be positive")
    rng = np.random.default_rng(seed)
    nets = {c: WhittleNetwork.for_features(rng, max_buffer=50_000, tsls_bound=4, class_id=c)
            for c in SERVICE_CLASSES}
    for n in nets.values():
        n.theta[-9:] = rng.normal(size=9)  # non-trivial output layer
    states = random_states(rng, n_ues)
    ue_nets = [nets[SERVICE_CLASSES[i % len(SERVICE_CLASSES)]] for i in range(n_ues)]
    xs = [s.as_vector() for s in states]

    single = []
    net0, x0 = ue_nets[0], xs[0]
    for k in range(warmup + repeats):
        t0 = time.perf_counter()
        net0.forward(x0)
        if k >= warmup:
            single.append(time.perf_counter() - t0)

    X = np.array(xs)
    chunks = []
    for j in range(threads):
        mine = list(range(n_ues))[j::threads]
        groups = {}
        for i in mine:
            groups.setdefault(id(ue_nets[i]), (ue_nets[i], []))[1].append(i)
        chunks.append([(net, np.array(ix)) for net, ix in groups.values()])

    def work(chunk):
        return [v for net, ix in chunk for v in net.forward_batch(X[ix])]

    batch = []
    out = None
    with ThreadPoolExecutor(threads) as pool:
        for k in range(warmup + repeats):
            t0 = time.perf_counter()
            if threads == 1:
                out = work(chunks[0])
            else:
                out = [v for f in [pool.submit(work, c) for c in chunks] for v in f.result()]
            if k >= warmup:
                batch.append(time.perf_counter() - t0)
    assert out is not None and len(out) == n_ues
    return {"n_ues": n_ues, "threads": threads, "repeats": repeats,
            "single": _percentiles(single), "batch": _percentiles(batch)}
