"""Inter-Prototype loss laboratory.

Margin-based softmax losses with an Inter-Prototype penalty on child
identities, a small numpy encoder trained on synthetic child/adult
identities, and the child-adult verification/identification protocols.
"""

from .core_math import cosine_matrix, finite_diff_grad, l2_normalize_columns, log_sum_exp, pca_2d
from .data import Dataset, SyntheticSpec, batch_sampler, child_class_index, generate_synthetic, load_csv, write_csv
from .encoder import EncoderParams, PrototypeHead, TrainConfig, encode_backward, encode_forward, sgd_step, train
from .losses import (
    LossResult,
    MarginConfig,
    inter_prototype_loss,
    inter_prototype_loss_values,
    margin_cross_entropy,
    margin_loss_values,
    total_loss,
    total_loss_values,
)

__version__ = "0.1.0"
