import numpy as np


def random_mask(rng, h, w, num_classes, ignore_frac=0.1, blocky=True):
    """Random label mask; ``blocky`` upsamples a coarse grid so components span several pixels."""
    if blocky:
        coarse = rng.integers(0, num_classes, size=((h + 3) // 4, (w + 3) // 4))
        mask = np.kron(coarse, np.ones((4, 4), dtype=np.int64))[:h, :w]
        noise = rng.random((h, w)) < 0.15
        mask[noise] = rng.integers(0, num_classes, size=int(noise.sum()))
    else:
        mask = rng.integers(0, num_classes, size=(h, w))
    mask[rng.random((h, w)) < ignore_frac] = 255
    return mask.astype(np.uint8)
