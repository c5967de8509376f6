"""Compiled vs pure-Python scan kernels, and binary vs float32 scanning.

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --keywords 100000 1000000 10000000 --repeats 5

For each corpus size this times full scoring (``scan_scores``) and the
per-thread selection scan (``scan_select``) on both backends, checks that
the two backends agree bit for bit, and times a BLAS float32 scan of a
random corpus of the same shape.
"""

import argparse
import sys

import numpy as np

from rbe import bench, kernels
from rbe.engine import ScanGeometry


def time_select(backend, planes, mags, ids, query, dim, geometry, repeats):
    k = kernels.get_backend(backend)
    n_threads = geometry.n_threads(planes.shape[1])

    def run():
        k.scan_select(
            query, planes, mags, ids, dim, True,
            geometry.threads_per_block, geometry.items_per_thread, geometry.queue_length, n_threads,
        )

    return bench.Timing("select", backend, planes.shape[1], bench._timed(run, repeats))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--keywords", type=int, nargs="+", default=[100_000, 1_000_000])
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--query-planes", type=int, default=2)
    p.add_argument("--keyword-planes", type=int, default=2)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    if len(backends) == 1:
        print("# compiled kernels unavailable; timing the pure-Python backend only", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    geometry = ScanGeometry()
    print("keywords\tkernel\tbackend\tmean_s\tstd_s\tkeywords_per_s")
    for count in args.keywords:
        planes = bench.random_planes(rng, args.keyword_planes, count, args.dim)
        mags = rng.uniform(1.0, 2.0, count).astype(np.float32)
        ids = np.arange(count, dtype=np.int64)
        query = bench.random_planes(rng, args.query_planes, 1, args.dim)[:, 0, :].copy()

        timings, scores = [], {}
        for name in backends:
            timings.append(bench.time_binary(planes, mags, query, args.dim, True, args.repeats, name))
            timings.append(time_select(name, planes, mags, ids, query, args.dim, geometry, args.repeats))
            scores[name] = kernels.get_backend(name).scan_scores(query, planes, mags, args.dim, True)
        del planes
        corpus = bench.random_float_corpus(rng, count, args.dim)
        floating = bench.time_float(corpus, rng.standard_normal(args.dim, dtype=np.float32), args.repeats)
        del corpus
        timings.append(floating)

        for t in timings:
            print(f"{count}\t{t.mode}\t{t.backend}\t{t.mean:.5f}\t{t.std:.5f}\t{t.throughput:.4g}")
        if len(scores) == 2:
            same = np.array_equal(scores["python"], scores["compiled"])
            print(f"# {count}: backends bit-identical: {same}")
        for t in timings:
            if t.mode == "binary":
                ratio, sd = bench.speedup(t, floating)
                print(f"# {count}: binary[{t.backend}] vs float32 BLAS throughput ratio {ratio:.2f} +/- {sd:.2f}")
        if len(backends) == 2:
            py = next(t for t in timings if t.mode == "binary" and t.backend == "python")
            cy = next(t for t in timings if t.mode == "binary" and t.backend == "compiled")
            print(f"# {count}: compiled is {py.mean / cy.mean:.1f}x the pure-Python scoring")


if __name__ == "__main__":
    main()
