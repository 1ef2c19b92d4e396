"""Self- and semi-supervised tabular representation learning.

Preprocess raw tables, pretrain a regularized contrastive autoencoder with
feature corruption, then consume the encoder by fine-tuning or by
concatenating its frozen embeddings onto the raw features for conventional
classifiers.
"""

from .corruption import (
    CorruptionConfig,
    EmpiricalMarginals,
    corrupt,
    fit_marginals,
)
from .data import (
    ColumnSchema,
    DataError,
    PreprocessorState,
    RawTable,
    TableDataset,
    fit_preprocessor,
    infer_schema,
    load_csv,
    split,
    transform,
)
from .evaluation import (
    EmbeddingBatch,
    MetricReport,
    accuracy,
    auroc,
    baseline_adapter,
    concat_features,
    embed_dataset,
    logistic_regression,
    register_adapter,
)
from .losses import LossConfig, LossReport
from .model import Checkpoint, ModelConfig, TabularAutoencoder, build_model, l2_normalize
from .training import (
    TrainConfig,
    TrainingDiverged,
    finetune,
    pretrain_self,
    pretrain_semi,
    rmsprop_step,
    sample_two_batches,
)

__version__ = "0.1.0"
