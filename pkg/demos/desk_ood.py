"""Vanilla training vs AdvProp with PGD vs AdvProp with AdvWavAug, one seed.

Each model is scored on the nine desk corruptions at five severities; the
corruption error of every kind is relative to the vanilla model, so vanilla
reads 100 and lower is better.  This is the single-seed, smaller version of
the acceptance run and takes a few minutes.

    python demos/desk_ood.py [seed]
"""
import sys

from wavaug import MetricReport
from wavaug.data import synthetic_shapes
from wavaug.evaluation import accuracy, corrupt_dataset, corruption_errors, desk_c_suite, mce_from_errors
from wavaug.training import PRESETS, TrainConfig, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
train_set = synthetic_shapes(3000, seed=0)
test_set = synthetic_shapes(500, seed=1)
suite = desk_c_suite()
corrupted = {spec: corrupt_dataset(test_set, spec) for spec in suite}

errors, reports = {}, []
for name, preset in (("vanilla", {}), ("advprop-pgd", PRESETS["advprop-pgd"]),
                     ("advprop-advwavaug", PRESETS["advprop-advwavaug"])):
    model, _ = train(train_set, TrainConfig(epochs=6, weight_decay=5e-4, seed=seed, **preset))
    errors[name] = corruption_errors(model, test_set, suite, corrupted=corrupted)
    ce, m = mce_from_errors(errors[name], errors.get("vanilla", errors[name]))
    reports.append(MetricReport(model=name, top1_acc={"clean": accuracy(model, test_set)},
                                ce=ce, mce=m, baseline="vanilla"))
    print(f"{name:<18} clean {reports[-1].top1_acc['clean']:.3f}  mCE {m:6.1f}")

print()
print(MetricReport.table_csv(reports))
