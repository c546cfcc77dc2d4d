"""``trdyn`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  Errors are reported as one line on stderr::

    trdyn: error: code=3 kind=DataError msg="..."

``TRDYN_NUM_THREADS`` caps the BLAS/OpenMP thread pools; it is applied
before numpy is imported.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

THREAD_ENV = "TRDYN_NUM_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_threads() -> None:
    n = os.environ.get(THREAD_ENV)
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", required=True, help="output directory")


def _fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iterations", type=int, dest="fit.iterations")
    p.add_argument("--order", type=int, choices=(1, 2, 3), dest="fit.order")
    p.add_argument("--dt-multiple", type=int, dest="fit.dt_multiple")
    p.add_argument("--batch-size", type=int, dest="fit.batch_size")
    p.add_argument("--learning-rate", type=float, dest="fit.learning_rate")
    p.add_argument("--fit-mode", choices=("derive", "requery"), dest="fit.rollout_mode")
    p.add_argument("--parametrization", choices=("equivalent", "raw"), dest="fit.parametrization")
    p.add_argument("--supervision", choices=("pairs", "from_origin"), dest="fit.supervision")
    p.add_argument("--backend", choices=("table", "mlp"), dest="model.backend")


def _rollout_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, dest="rollout.n_steps")
    p.add_argument("--mode", choices=("derive", "requery"), dest="rollout.mode")
    p.add_argument("--step-multiple", type=int, dest="rollout.dt_multiple")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trdyn", description="Rigid-particle motion fitting and extrapolation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a trajectory dataset")
    _common(p)
    p.add_argument("--benchmark", dest="scene.benchmark", help="multipart, indoor, fan or piecewise")
    p.add_argument("--particles", type=int, dest="scene.n_particles")
    p.add_argument("--frames", type=int, dest="scene.n_frames")

    p = sub.add_parser("fit", help="fit a dynamics field to the training frames")
    p.add_argument("dataset")
    _common(p)
    _fit_flags(p)

    p = sub.add_parser("extrapolate", help="roll a fitted field forward from the last training frame")
    p.add_argument("dataset")
    p.add_argument("checkpoint")
    _common(p)
    _rollout_flags(p)

    p = sub.add_parser("segment", help="cluster particles by fitted motion")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    _common(p)
    p.add_argument("--k", type=int, dest="segment.k")
    p.add_argument("--standardize", action="store_const", const=True, dest="segment.standardize")
    p.add_argument("--query-time", type=float, dest="segment.query_time")

    p = sub.add_parser("render", help="splat a dataset or prediction directory to PNG frames")
    p.add_argument("dataset")
    _common(p)
    p.add_argument("--camera", dest="render.camera", help="camera JSON file")
    p.add_argument("--width", type=int, dest="render.width")
    p.add_argument("--height", type=int, dest="render.height")
    p.add_argument("--every", type=int, dest="render.every")

    p = sub.add_parser("continual", help="windowed fit and one-window-ahead extrapolation")
    p.add_argument("dataset")
    _common(p)
    _fit_flags(p)
    p.add_argument("--history", type=float, dest="continual.history")

    p = sub.add_parser("ablate", help="fit and extrapolate over the ablation grid")
    p.add_argument("dataset")
    _common(p)
    _fit_flags(p)
    _rollout_flags(p)
    return parser


def _overrides(args) -> dict:
    return {k: v for k, v in vars(args).items() if "." in k or k == "seed"}


def _summary(rows, header) -> str:
    lines = ["  ".join(f"{h:>12}" for h in header)]
    for r in rows:
        lines.append("  ".join(f"{v:>12.4g}" if isinstance(v, float) else f"{v!s:>12}" for v in r))
    return "\n".join(lines)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from . import pipeline as pl

    cfg = pl.load_config(args.config, _overrides(args))
    cmd = args.command
    if cmd == "generate":
        ds = pl.cmd_generate(cfg, args.out)
        print(f"wrote {ds.n_particles} particles x {ds.n_frames} frames (train {ds.split}) to {args.out}")
    elif cmd == "fit":
        ckpt, res = pl.cmd_fit(args.dataset, cfg, args.out)
        print(f"final loss {res.loss_history[-1] if res.loss_history else float('nan'):.6g} "
              f"after {len(res.loss_history)} iterations; checkpoint {ckpt}")
    elif cmd == "extrapolate":
        rep = pl.cmd_extrapolate(args.dataset, args.checkpoint, cfg, args.out)
        rot = [r if r is not None else float("nan") for r in rep["rot_err"]]
        print(_summary(list(zip(rep["horizons"], rep["times"], rep["rmse"], rot)),
                       ["horizon", "time", "rmse", "rot_err"]))
    elif cmd == "segment":
        rep = pl.cmd_segment(args.checkpoint, args.dataset, cfg, args.out)
        m = rep["metrics"]
        print(_summary([[rep["k"], m["accuracy"], m["mIoU"], m["RandIndex"]]],
                       ["K", "accuracy", "mIoU", "RandIndex"]))
    elif cmd == "render":
        paths = pl.cmd_render(args.dataset, cfg, args.out)
        print(f"wrote {len(paths)} frames to {args.out}")
    elif cmd == "continual":
        rep = pl.cmd_continual(args.dataset, cfg, args.out)
        print(_summary([[w["window_end"], w["extrapolate_until"], w["rmse"], w["rmse_over_diameter"]]
                        for w in rep["windows"]], ["window_end", "until", "rmse", "rmse/diam"]))
    elif cmd == "ablate":
        rep = pl.cmd_ablate(args.dataset, cfg, args.out)
        rows = [[c["cell"]["dt_multiple"], c["cell"]["order"], c["cell"]["rollout_mode"],
                 c["cell"]["parametrization"], c["cell"]["supervision"],
                 c["rmse"][-1] if c["rmse"] else float("nan")] for c in rep["cells"]]
        print(_summary(rows, ["dt_mult", "order", "mode", "param", "superv", "final_rmse"]))
    return 0


def _error_line(exc: BaseException, code: int) -> str:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return f"trdyn: error: code={code} kind={type(exc).__name__} msg={json.dumps(msg)}"


def main(argv=None) -> int:
    _apply_threads()
    from .errors import ConfigError, DataError, NumericalError

    try:
        return run(argv)
    except ConfigError as exc:
        err, code = exc, 2
    except DataError as exc:
        err, code = exc, 3
    except (NumericalError, FloatingPointError) as exc:
        err, code = exc, 4
    except (OSError, ValueError) as exc:
        err, code = exc, 3
    print(_error_line(err, code), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
