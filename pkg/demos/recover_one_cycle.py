"""Recover circuit-parameter functions from a single simulated discharge.

A cell with known parameters is driven by a random excitation profile.
Operating-point hyperparameters are fitted by maximum likelihood, the joint
filter and smoother are run once more, and the recovered functions are
compared with the truth on the SOC and current values the cycle visited.

    python3 demos/recover_one_cycle.py            (about 4 minutes)
    python3 demos/recover_one_cycle.py --quick    (under a minute)

The quick mode uses a 20-minute cycle and a small fit budget. It shows the
workflow but not the accuracy: expect tens of percent error on alpha and beta
instead of a few percent.
"""

import argparse
import time

import numpy as np

from gpecm import hyperopt as ho
from gpecm import joint_ekf as je
from gpecm import simulator as sim


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--quick", action="store_true", help="short cycle and small fit budget")
    args = ap.parse_args()

    truth = sim.table1_truth()
    duration = 1200 if args.quick else 3600
    # remove about 0.55 of the charge over the cycle
    profile = sim.synth_profile(1, duration, 5.0, -0.55 / truth.q_inv * 3600 / duration)
    seg, latent = sim.simulate(truth, profile, 0.9, 25.0, 101)
    print(f"simulated {len(seg)} s, SOC {latent.z[0]:.2f} -> {latent.z[-1]:.2f}")

    z_range, i_range = ho.data_ranges([seg], truth.ocv, 1 / 1.09)
    spec = ho.ModelSpec(z_range, i_range, truth.ocv, truth.thermal)
    budget = dict(n_random=8, n_refine=1, maxiter=8) if args.quick else dict(n_random=30, n_refine=1, maxiter=40)
    t0 = time.perf_counter()
    fit = ho.fit_stage1([seg], spec, seed=0, **budget)
    print(f"stage-1 fit: phi = {fit.phi:.2f} in {time.perf_counter() - t0:.0f} s")
    print(f"  noise: sigma_V {fit.theta.noise_v * 1e3:.2f} mV (true 5), sigma_T {fit.theta.noise_t:.3f} K (true 0.1)")

    model = ho.build_model(fit.theta, spec, zeta_origin=None)
    smoothed = je.rts_smooth(je.run_lifetime([seg], model).checkpoints, model.gp, model.offsets)

    excited = np.abs(seg.i) >= 0.1 * np.abs(seg.i).max()
    z, i = latent.z[excited], seg.i[excited]
    print("normalised RMSE over the excited region:")
    for name, pts, ref in (
        ("alpha", z[:, None], truth.alpha_fn(z)),
        ("beta", z[:, None], truth.beta_fn(z)),
        ("r0", np.column_stack([z, i]), truth.r0_fn(z, i)),
        ("q_inv", None, np.array([truth.q_inv])),
    ):
        est = smoothed.query(0, name, pts)[0]
        err = np.sqrt(np.mean((est - ref) ** 2)) / np.mean(np.abs(ref))
        print(f"  {name:6s} {100 * err:5.2f} %")

    print("R0 at 0.5 SOC over current (mOhm): estimate, 2 sd, truth")
    for cur in (-4.0, -2.0, 0.0, 2.0):
        m, v = smoothed.query(0, "r0", [[0.5, cur]])
        print(f"  I = {cur:+.0f} A   {1e3 * m[0]:6.2f}  +-{2e3 * np.sqrt(v[0]):5.2f}   {1e3 * truth.r0(0.5, cur):6.2f}")


if __name__ == "__main__":
    main()
