"""Learn a scene window by window while its motion keeps changing.

In the piecewise scene one of two parts changes its motion inside every
0.15 time-unit window.  After each window the table is re-anchored at the
newest frame, refitted on the trailing 0.075 time units and asked to
predict the next window.  Growing the history instead (``--history 0``
uses the whole prefix) mixes motion regimes and the later windows get
worse.

    python3 demos/continual_windows.py [--history 0.075]
"""

import argparse

from trdyn.fitting import FitConfig, continual_fit, new_field
from trdyn.scenes import benchmark_spec, generate_scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--history", type=float, default=0.075)
    ap.add_argument("--iterations", type=int, default=500)
    args = ap.parse_args()

    ds = generate_scene(benchmark_spec("piecewise", 600))
    cfg = FitConfig(iterations=args.iterations, batch_size=2048)
    rows = continual_fit(ds, new_field(ds, cfg, init="zeros"), [0.15, 0.30, 0.45, 0.60, 0.75], cfg,
                         history=args.history or None)
    diam = ds.diameter()
    print(f"{'window end':>10} {'predicts to':>11} {'RMSE/diam':>10}")
    for r in rows:
        print(f"{r['window_end']:>10.2f} {r['extrapolate_until']:>11.3f} {r['rmse'] / diam:>10.2e}")
    rel = [r["rmse"] / diam for r in rows]
    print(f"worst / best window: {max(rel) / min(rel):.2f}")


if __name__ == "__main__":
    main()
