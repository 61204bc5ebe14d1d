"""Fit a single low-resolution expert to the one-sphere scene and look at it.

Runs in well under a minute. Writes truth.png and fit.png to ./demo_out.
"""
import os

import numpy as np

from moefield import autodiff as ad
from moefield.experts import build_bank
from moefield.imageio import write_png
from moefield.metrics import psnr, ssim
from moefield.render import expert_field, render_image
from moefield.scene import get_scene, make_dataset
from moefield.trainer import RayBatcher, TrainConfig, pretrain_expert

out_dir = "demo_out"
os.makedirs(out_dir, exist_ok=True)

print("== 1. render ground truth ==")
data = make_dataset(get_scene("one-sphere"), 8, 2, 32, 32, seed=0)
train_cams, train_imgs = data.split("train")
test_cams, test_imgs = data.split("test")
print("   train views:", len(train_cams), " test views:", len(test_cams))
write_png(os.path.join(out_dir, "truth.png"), test_imgs[0])

print("== 2. one expert, 10^3 voxels ==")
bank = build_bank(10, 3, seed=0)
expert = bank[0]
print("   resolution:", expert.resolution, " parameters:", expert.param_count)

cfg = TrainConfig(batch_rays=512, n_samples=32)
batcher = RayBatcher(data, cfg.batch_rays)
rng = np.random.default_rng(0)

print("== 3. train ==")
for block in range(5):
    losses = pretrain_expert(expert, batcher, cfg, 40, rng)
    print(f"   iters {40 * (block + 1):4d}   photometric loss {np.mean(losses[-10:]):.5f}")

print("== 4. score on held-out views ==")
with ad.no_grad():
    renders = [render_image(expert_field(expert), c, 48) for c in test_cams]
print("   psnr:", round(np.mean([psnr(r, t) for r, t in zip(renders, test_imgs)]), 2), "dB")
print("   ssim:", round(np.mean([ssim(r, t) for r, t in zip(renders, test_imgs)]), 4))
write_png(os.path.join(out_dir, "fit.png"), renders[0])
print("   wrote", out_dir + "/truth.png and fit.png")
