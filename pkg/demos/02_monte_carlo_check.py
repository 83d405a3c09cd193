"""Monte-Carlo verification of the analytic moment propagation.

The closed-loop mean/covariance recursion is exact, so sample moments of
simulated trajectories must converge to it at the 1/sqrt(K) rate.  This
script overlays both and reports the largest deviation in standard errors.

Run:  python demos/02_monte_carlo_check.py
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from lqsid import (
    DrivingParams,
    ParamVectors,
    build_driving_problem,
    observed_moments,
    propagate,
    rollout,
    sample_moments,
    selection_matrix,
    synthesize,
)

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

driving = DrivingParams(N=60)
params = ParamVectors(
    s=[1e5, 5e3, 1.0, 1.0],
    sigma=[0, 0, 0, 0, 0.05, 0.2, 0.05, 0.6, 0.1, 0.1, 0.1],
)
prob = build_driving_problem(driving, params)
gains = synthesize(prob)
M = selection_matrix([0, 1], 5)

analytic_mean, analytic_cov = observed_moments(propagate(prob, gains), M)

K = 20_000
batch = rollout(prob, gains, K, seed=2024)
sampled_mean, sampled_cov = sample_moments(batch, M)

se_mean = np.sqrt(sampled_cov[:, 0, 0] / K)
z = np.abs(sampled_mean[:, 0] - analytic_mean[:, 0]) / np.maximum(se_mean, 1e-15)
print(f"{K} rollouts; worst mean-angle deviation: {z.max():.2f} standard errors")

t = np.arange(driving.N + 1) * driving.dt
fig, axes = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
axes[0].plot(t, analytic_mean[:, 0], label="analytic")
axes[0].plot(t, sampled_mean[:, 0], ":", label=f"sampled (K={K})")
axes[0].set_ylabel("mean angle [rad]")
axes[0].legend(fontsize=8)
axes[1].plot(t, analytic_cov[:, 0, 0], label="analytic")
axes[1].plot(t, sampled_cov[:, 0, 0], ":", label="sampled")
axes[1].set_ylabel("angle variance [rad$^2$]")
axes[1].set_xlabel("time [s]")
axes[1].legend(fontsize=8)
fig.tight_layout()
fig.savefig(os.path.join(OUT, "monte_carlo_check.svg"))
plt.close(fig)
print(f"plot written to {OUT}/monte_carlo_check.svg")

# a handful of raw trajectories for intuition
fig, ax = plt.subplots(figsize=(6, 4))
for k in range(12):
    ax.plot(t, batch.trajectories[k, :, 0], lw=0.6, alpha=0.6)
ax.plot(t, analytic_mean[:, 0], "k", lw=2, label="analytic mean")
ax.set_xlabel("time [s]")
ax.set_ylabel("angle [rad]")
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig(os.path.join(OUT, "sample_trajectories.svg"))
plt.close(fig)
print(f"plot written to {OUT}/sample_trajectories.svg")
