"""
Turning pictures into 64 tokens
===============================

The tokenizer compresses a 32x32 picture into an 8x8 grid of codebook ids.
The per-position quantization error it leaves behind is what the
easy-first plan ranks on.

The first run trains the tokenizer (the desk default takes a while on one
core) and caches it under ``$PROGEN_CACHE``; later runs load it.
"""

import logging
from pathlib import Path

import numpy as np

from progen.experiments import Workspace
from progen.ppm import write_ppm
from progen.vqtok import psnr, quantize

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path("demo_out")
out.mkdir(exist_ok=True)

ws = Workspace()
tok = ws.tokenizer
test = ws.dataset.test

# %%
# Reconstruction quality on held-out pictures.
recon = tok.reconstruct(test.images)
p = psnr(recon, test.images)
print(f"test PSNR {p.mean():.2f} dB (worst {p.min():.2f}, best {p.max():.2f})")

# %%
# How much of the codebook is actually in use.
res = tok.tokenize(test.images)
print("distinct codes on the test split:", len(np.unique(res.tokens)), "of", tok.cfg.codebook_size)

# %%
# Quantization error per grid position.  Flat background cells are easy;
# cells crossed by an object edge are not.
err = quantize(tok.encode(test.images[:1]), tok.codebook).errors.reshape(8, 8)
print(test.prompt(0))
for row in err:
    print(" ".join(f"{v:6.3f}" for v in row))

# %%
# Originals on top, reconstructions below.
pair = np.concatenate([np.concatenate(test.images[:8], axis=1), np.concatenate(recon[:8], axis=1)], axis=0)
write_ppm(out / "reconstructions.ppm", pair)
