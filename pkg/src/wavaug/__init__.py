"""On-manifold adversarial augmentation in the wavelet domain, at desk scale."""

__version__ = "0.1.0"

from .wavelet import (FilterBank, WaveletPyramid, dwt1d, dwt2d, get_bank, haar_bank, idwt1d,
                      idwt2d, sym8_bank)
from .spectrum import (AttentionMap, BandStepSchedule, PerturbBound, TABLE1, apply_attention,
                       attention_gradient, perturbation_bound, quantile_threshold,
                       table1_schedule, threshold_filter)
from .nn import (ArchSpec, Batch, Classifier, backward, features, forward, load_checkpoint,
                 save_checkpoint, sgd_step)
from .attack import AttackConfig, advwavaug_attack, gaussian_augment, pgd_attack
from .training import TrainConfig, TrainReport, train, train_advprop, train_normal_at, train_vanilla
from .data import DatasetSource, export_images, load_dataset
from .evaluation import (CorruptionSpec, MetricReport, accuracy, asr, corrupt, fid_norm,
                         lpips_norm, mce, score, transfer_eval)
