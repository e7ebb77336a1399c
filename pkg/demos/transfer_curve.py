"""Attack success against image quality as a transfer attack grows.

A source model is attacked with 40 small steps and every intermediate batch
is scored on an independently trained target: attack success rate, and the
normalized Frechet and perceptual distances (1.0 means untouched images).
Printed as two columns per attack so the trade-off can be read off directly.

    python demos/transfer_curve.py
"""
from dataclasses import replace

from wavaug import AttackConfig, TrainConfig, train, transfer_eval
from wavaug.data import synthetic_shapes

train_set = synthetic_shapes(1500, seed=0)
test_set = synthetic_shapes(300, seed=1)
cfg = TrainConfig(epochs=4, batch_size=64, weight_decay=5e-4)
source, _ = train(train_set, cfg)
target, _ = train(train_set, replace(cfg, seed=1))

for kind in ("pgd", "advwavaug"):
    out = transfer_eval(source, target, AttackConfig(kind=kind), test_set, iterations=40)
    print(f"\n{kind}: step  asr    fid_norm  lpips_norm")
    for i, p in enumerate([out["start"]] + out["curve"]):
        if i % 5 == 0:
            print(f"      {i:4d}  {p['asr']:.3f}  {p['fid_norm']:.3f}     {p['lpips_norm']:.3f}")
