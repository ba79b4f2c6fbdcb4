# %% [markdown]
# # Training losses and evaluation metrics
#
# The objective is a sum of three terms per restored output: a Charbonnier
# pixel loss, the same penalty on 4-neighbour Laplacians, and an L1 penalty
# on the real and imaginary parts of the 2-D FFT of the residual.  The FFT
# is a small radix-2 implementation, so sides must be powers of two.

# %%
import numpy as np

from invkernel import losses
from invkernel.fft import fft2, ifft2
from invkernel.metrics import psnr, ssim

rng = np.random.default_rng(0)
x = rng.random((16, 16, 3))
print("fft2 vs numpy:", float(np.abs(fft2(x) - np.fft.fft2(x, axes=(0, 1))).max()))
print("round trip:", float(np.abs(ifft2(fft2(x)) - x).max()))

# %% [markdown]
# With both outputs equal to the target only the Charbonnier floors remain:
# 2 * (1 + 0.05) * 1e-3 = 0.0021.

# %%
target = rng.random((16, 16, 3))
total, _, parts = losses.total_loss([target, target], target)
print("perfect outputs:", total)
noisy = target + rng.normal(0, 0.05, target.shape)
total, grads, parts = losses.total_loss([noisy, noisy], target)
print("noisy outputs:", round(total, 5), {k: round(v, 5) for k, v in parts.items()})

# %% [markdown]
# PSNR and SSIM.  A uniform 0.1 offset gives 20 dB; SSIM uses an 11x11
# Gaussian window and only windows that fit inside the image.

# %%
print("0.1 offset:", psnr(target * 0.8 + 0.1, target * 0.8))
print("noisy PSNR / SSIM:", psnr(noisy, target), ssim(np.clip(noisy, 0, 1), target))
print("Y-channel PSNR:", psnr(noisy, target, mode="y"))
