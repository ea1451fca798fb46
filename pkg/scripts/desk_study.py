"""Desk-scale simulation study next to the published AMSE values.

    python3 scripts/desk_study.py [--config configs/desk_study.json] [--processes N]
"""

import argparse
import logging

from dqp.bench import reference_table, run_study
from dqp.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk_study.json")
    ap.add_argument("--processes", type=int)
    ap.add_argument("--datasets", type=int, help="override bench.datasets")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    datasets = args.datasets or cfg.bench.datasets
    report = run_study(cfg.cells(), datasets, cfg.fit_settings(), seed=cfg.seed,
                       processes=args.processes or cfg.threads,
                       full_scale=cfg.bench.full_scale)
    report.write(cfg.out_dir)

    ref = {(r["scenario"], r["T"], r["n"], r["method"]): r for r in reference_table()}
    print(f"{'cell':<14}{'method':<8}{'AMSE':>9}{'(s.e.)':>10}{'published':>11}{'(s.e.)':>10}")
    for r in report.rows:
        key = (r["scenario"], r["T"], r["n"], r["method"])
        pub = ref.get(key)
        cell = f"{r['scenario']} T={r['T']} n={r['n']}"
        line = f"{cell:<14}{r['method']:<8}{r['amse']:>9.4f}{r['se']:>10.4f}"
        if pub:
            line += f"{pub['amse']:>11.4f}{pub['se']:>10.4f}"
        print(line)
    if report.failures:
        print(f"{len(report.failures)} failed fit(s), see {cfg.out_dir}/failures.csv")


if __name__ == "__main__":
    main()
