"""Train the MLP noise predictor on toy 16x16 denoising and sample with 6 steps.

Takes about two and a half minutes on one core. Pass a smaller iteration
count as the first argument for a quicker look.
"""
import sys
import time

import numpy as np

from geodesic_diffusion import (
    BoundaryConditions,
    MlpDenoiser,
    SamplerConfig,
    ToyImageTask,
    TrainingConfig,
    make_schedule,
    make_toy_images,
    psnr_pm1,
    sample,
    smooth,
    ssim_pm1,
    train,
)

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 5000

splits = make_toy_images(ToyImageTask(noise_std=0.4, train=2000))
test = splits["test"]
schedule = make_schedule(BoundaryConditions(1.0, 0.002, 1.0, 80.0))

model = MlpDenoiser(256, 1, (512, 512, 512), schedule=schedule, sigma_data=0.4, zero_init_output=True)
t0 = time.perf_counter()
result = train(model, splits["train"], TrainingConfig(batch_size=128, lr=5e-4, iterations=iterations,
                                                      schedule=schedule))
print(f"trained {iterations} iterations in {time.perf_counter() - t0:.0f} s, "
      f"final smoothed loss {smooth(result.losses, 200)[-1]:.4f}")

x = sample(SamplerConfig(6, schedule, 3.0), result.model, test.cond)
side = test.shape
rows = []
for out, clean, noisy in zip(x, test.x0, test.cond[:, 0]):
    rows.append((psnr_pm1(noisy, clean), psnr_pm1(out, clean),
                 ssim_pm1(noisy.reshape(side), clean.reshape(side)), ssim_pm1(out.reshape(side), clean.reshape(side))))
rows = np.array(rows)
print(f"degraded PSNR {np.median(rows[:, 0]):.2f} dB  SSIM {np.median(rows[:, 2]):.3f}")
print(f"sampled  PSNR {np.median(rows[:, 1]):.2f} dB  SSIM {np.median(rows[:, 3]):.3f}")
print(f"median gain {np.median(rows[:, 1] - rows[:, 0]):+.2f} dB")
