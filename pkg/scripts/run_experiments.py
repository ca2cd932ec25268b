"""Train and evaluate the default toy study, filling the acceptance cache.

    python scripts/run_experiments.py                # default cache location
    python scripts/run_experiments.py --root runs/study --recompute
"""

import argparse
import logging
import os
from pathlib import Path

import torch

from ssdc.experiment import ABLATIONS, BARYCENTRIC, UNCONDITIONAL_LS, EvalConfig, Experiment, ExperimentConfig, method_name, report_table

DEFAULT_ROOT = Path(__file__).resolve().parents[1] / ".cache" / "acceptance"


def summarize(exp: Experiment, ecfg: EvalConfig, results: dict) -> None:
    table = report_table(results)
    tags = sorted({d for _, d in table}, key=lambda t: (len(t) > 6, float(t.split("%")[0].split("-")[0])))
    names = [method_name(v, s) for s in exp.cfg.seeds for v in ABLATIONS] + [UNCONDITIONAL_LS, BARYCENTRIC]
    print(f"{'mean RMSE [m]':22s}" + "".join(f"{t:>11s}" for t in tags))
    for name in names:
        print(f"{name:22s}" + "".join(f"{table[name, t].mean_rmse:11.4f}" for t in tags))
    print(f"\n{'median RMSE [m]':22s}" + "".join(f"{t:>11s}" for t in tags))
    for name in names:
        print(f"{name:22s}" + "".join(f"{table[name, t].median_rmse:11.4f}" for t in tags))
    timing = results["timing"]
    print(f"\nsingle step {timing['single_step']['seconds'] * 1e3:.1f} ms/image, "
          f"{timing['multi_step']['steps']}-step DDIM {timing['multi_step']['seconds'] * 1e3:.1f} ms/image, "
          f"speedup {timing['speedup']:.1f}x")
    print(f"training wall time {exp.training_seconds() / 3600:.2f} h; artifacts in {exp.dir}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--root", type=Path, default=Path(os.environ.get("SSDC_ACCEPTANCE_ROOT", DEFAULT_ROOT)))
    p.add_argument("--recompute", action="store_true", help="re-run evaluation even if results are cached")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(args.threads)
    exp = Experiment(ExperimentConfig(), args.root)
    ecfg = EvalConfig()
    summarize(exp, ecfg, exp.results(ecfg, recompute=args.recompute))


if __name__ == "__main__":
    main()
