#!/usr/bin/env python3
"""Fill the acceptance run cache (tests/acceptance_cache) ahead of pytest.

Each run trains one forecaster variant on one simulated dataset and scores
it on the test split; the result lands as JSON keyed by the run's config
fingerprint.  Re-running skips anything already cached, so the script is
safe to interrupt and resume.  Delete a run's JSON file to retrain it.

Usage:
    python3 scripts/populate_acceptance_cache.py [--only gamma scarcity ...]
                                                 [--threads N]
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import acceptance_specs as spx  # noqa: E402
import treatcast.evalx as ev  # noqa: E402


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument(
        "--only", nargs="*", choices=sorted(spx.ALL_SPECS), default=None,
        help="populate just these sweeps (default: all of them)",
    )
    parser.add_argument(
        "--threads", type=int, default=1,
        help="worker processes for pending runs (default 1)",
    )
    args = parser.parse_args(argv)

    names = args.only or list(spx.ALL_SPECS)
    t_start = time.time()
    trained = 0
    failed = 0

    for name in names:
        spec = spx.ALL_SPECS[name]
        value_of = {ev.run_fingerprint(cfg): v for v, cfg in spec.jobs()}
        print(
            f"=== sweep {name!r}: axis={spec.axis} values={spec.values} "
            f"variants={spec.variants} seeds={spec.n_seeds} "
            f"({len(value_of)} runs)",
            flush=True,
        )

        def progress(fp: str, res: ev.RunResult) -> None:
            nonlocal trained, failed
            trained += 1
            stamp = time.strftime("%H:%M:%S")
            head = (f"{stamp} [{trained}] {spec.axis}={value_of[fp]} "
                    f"{res.variant} seed={res.seed}")
            if res.failed:
                failed += 1
                print(f"{head} FAILED: {res.error}", flush=True)
            else:
                print(
                    f"{head} rmse={res.rmse_overall:.2f} "
                    f"epochs={res.stopped_epoch} wall={res.wall_time:.0f}s",
                    flush=True,
                )

        out = ev.run_sweep(
            spec,
            spx.TABLES_DIR / name,
            threads=args.threads,
            progress=progress,
            cache_dir=spx.RUNS_DIR,
        )
        for row in out["table"]:
            print(
                "    "
                + " ".join(
                    f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                    for k, v in row.items()
                ),
                flush=True,
            )

    wall = time.time() - t_start
    print(f"done: {trained} runs trained this session ({failed} failed), "
          f"wall {wall:.0f}s", flush=True)
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
