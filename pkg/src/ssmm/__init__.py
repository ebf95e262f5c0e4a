"""Multimodal (3D image + tabular) self-supervised pretraining on a
from-scratch autodiff core."""
from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import MultimodalClassifier, SSLPretrainer
from .explain import export_embeddings, export_heatmap, gradcam, most_informative_slice
from .metrics import alignment_report, classification_metrics, evaluate, roc_auc, youden_point
from .models import ModelConfig, MultimodalModel
from .objectives import ClipConfig, clip_loss, itm_loss, mine_hard_negatives, ntxent_loss, total_loss
from .tensor import Tensor, no_grad
from .train import RunConfig, finetune, prepare_cohort, pretrain

__version__ = "0.1.0"

__all__ = [
    "ClipConfig",
    "ModelConfig",
    "MultimodalClassifier",
    "MultimodalModel",
    "RunConfig",
    "SSLPretrainer",
    "Tensor",
    "alignment_report",
    "classification_metrics",
    "clip_loss",
    "evaluate",
    "export_embeddings",
    "export_heatmap",
    "finetune",
    "gradcam",
    "itm_loss",
    "load_checkpoint",
    "mine_hard_negatives",
    "most_informative_slice",
    "no_grad",
    "ntxent_loss",
    "prepare_cohort",
    "pretrain",
    "roc_auc",
    "save_checkpoint",
    "total_loss",
    "youden_point",
]
