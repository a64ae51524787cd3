"""Weakly supervised multiple-instance learning with contrastive instance
embeddings and prototype-based pseudo labels, plus a synthetic bag generator
and an evaluation harness."""

from .contrastive import (ContrastivePool, EmbeddingQueue, QueueEntry,
                          batch_contrastive_loss, build_pool, iwscl_loss,
                          split_family)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Bag, FlatInstances, Instance, MilDataset, SyntheticConfig,
                   dataset_equal, generate_gaussian_mil, generate_grid_mil,
                   load_dataset, save_dataset, validate_dataset)
from .errors import (ConfigurationError, DataError, DimensionError,
                     InsmilError, NumericalError, ParseError, SchemaError,
                     UndefinedAucError, UsageError, ValidationError)
from .metrics import (EvalReport, RocResult, evaluate, export_score_map,
                      predict_bags, predict_instances, pseudo_label_quality,
                      roc_auc)
from .nn import (EmaPair, GradcheckReport, Mlp, SgdMomentum, gradcheck,
                 l2_normalize, softmax_xent)
from .prototypes import PrototypeBank, PseudoLabelStore, instance_cls_loss
from .training import (Batch, EpochMetrics, ModelStack, StepMetrics,
                       TrainConfig, TrainState, augment_views,
                       bag_constraint_loss, build_gradcheck_problem, fit,
                       train_step, write_metrics_csv)

__version__ = "0.1.0"

__all__ = [
    "Bag", "Batch", "ConfigurationError", "ContrastivePool", "DataError",
    "DimensionError", "EmaPair", "EmbeddingQueue", "EpochMetrics",
    "EvalReport", "FlatInstances", "GradcheckReport", "InsmilError",
    "Instance", "MilDataset", "Mlp", "ModelStack", "NumericalError",
    "ParseError", "PrototypeBank", "PseudoLabelStore", "QueueEntry",
    "RocResult", "SchemaError", "SgdMomentum", "StepMetrics",
    "SyntheticConfig", "TrainConfig", "TrainState", "UndefinedAucError",
    "UsageError", "ValidationError", "augment_views", "bag_constraint_loss",
    "batch_contrastive_loss", "build_gradcheck_problem", "build_pool",
    "dataset_equal", "evaluate", "export_score_map", "fit",
    "generate_gaussian_mil", "generate_grid_mil", "gradcheck",
    "instance_cls_loss", "iwscl_loss", "l2_normalize", "load_checkpoint",
    "load_dataset", "predict_bags", "predict_instances",
    "pseudo_label_quality", "roc_auc", "save_checkpoint", "save_dataset",
    "softmax_xent", "split_family", "train_step", "validate_dataset",
    "write_metrics_csv",
]
