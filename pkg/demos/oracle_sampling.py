"""Few-step truncated sampling with an exact denoiser.

The conditional Gaussian task has a closed-form noise predictor, so every
error printed here comes from the sampler alone: the step count and the
starting noise ratio.
"""
import math

import numpy as np

from geodesic_diffusion import (
    ConditionalGaussianOracle,
    ConditionalGaussianTask,
    ExponentialVE,
    SamplerConfig,
    invert_noise_ratio,
    psnr_pm1,
    sample,
)

ve = ExponentialVE()
task = ConditionalGaussianTask((0.0,) * 16, (0.25,) * 16, 0.1)
data = task.sample(2000, np.random.default_rng(0))
oracle = ConditionalGaussianOracle(task, ve)
noise = np.random.default_rng(1).standard_normal(data.x0.shape)

print(f"degraded input {psnr_pm1(data.cond[:, 0], data.x0):.2f} dB, posterior mean "
      f"{psnr_pm1(task.posterior_mean(data.cond[:, 0]), data.x0):.2f} dB")

print("\nstep count at ratio 3")
for steps in range(2, 11):
    x = sample(SamplerConfig(steps, ve, 3.0), oracle, data.cond, noise=noise)
    print(f"  N={steps:2d}  {psnr_pm1(x, data.x0):6.2f} dB")

print("\nstarting ratio, step size held near the 6-step ratio-3 value")
t3 = invert_noise_ratio(ve, 3.0)
for ratio in (1.0, 3.0, 5.0, 10.0, 20.0, 80.0):
    steps = math.ceil(6 * invert_noise_ratio(ve, ratio) / t3 - 1e-9)
    x = sample(SamplerConfig(steps, ve, ratio), oracle, data.cond, noise=noise)
    print(f"  ratio {ratio:4g}  N={steps:2d}  {psnr_pm1(x, data.x0):6.2f} dB")
