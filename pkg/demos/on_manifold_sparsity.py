"""Why a wavelet attention attack stays on the image manifold and PGD does not.

Train a small classifier on the synthetic desk shapes, keep only the 10%
largest wavelet coefficients of each test image, then attack both ways and
count how many of the discarded (zero) coefficients each attack touches.
Writes a few clean/AdvWavAug/PGD triples to ./out/sparsity for eyeballing.

    python demos/on_manifold_sparsity.py
"""
from pathlib import Path

import numpy as np

from wavaug import AttackConfig, Batch, TrainConfig, advwavaug_attack, export_images, pgd_attack
from wavaug.data import synthetic_shapes
from wavaug.evaluation import accuracy
from wavaug.training import train
from wavaug.wavelet import dwt2d, idwt2d

train_set = synthetic_shapes(2000, seed=0)
test_set = synthetic_shapes(200, seed=1)
model, _ = train(train_set, TrainConfig(epochs=4, weight_decay=5e-4))
print(f"clean accuracy {accuracy(model, test_set):.3f}")

# one AdvWavAug step on the thresholded images; the sign rule makes the
# change visible on a confident model
cfg = AttackConfig(keep_fraction=0.1, clamp_output=False, path="clean", step_rule="sign")
res = advwavaug_attack(model, test_set.images, test_set.labels, cfg)
sparse = res.coeffs.flatten() == 0
print(f"kept {1 - sparse.mean():.1%} of coefficients per image")

sparse_img = idwt2d(res.coeffs).transpose(0, 2, 3, 1)
pgd = pgd_attack(model, sparse_img, test_set.labels,
                 AttackConfig(kind="pgd", epsilon=4 / 255, alpha=4 / 255, path="clean"))


def touched(adv):
    moved = dwt2d((adv - sparse_img).transpose(0, 3, 1, 2), res.coeffs.levels).flatten()
    return float(np.mean(np.abs(moved[sparse]) > 1e-12))


print(f"AdvWavAug moved {touched(res.images):.1%} of the zeroed coefficients")
print(f"PGD       moved {touched(pgd):.1%} of the zeroed coefficients")

for name, imgs in (("sparse", sparse_img), ("advwavaug", res.images), ("pgd", pgd)):
    print(f"accuracy on {name:<9} {accuracy(model, Batch(np.clip(imgs, 0, 1), test_set.labels)):.3f}")
    out = Path("out/sparsity") / name
    export_images(Batch(np.clip(imgs[:8], 0, 1), test_set.labels[:8]), out)
print("images written under out/sparsity/")
