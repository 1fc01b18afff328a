"""Zero-shot 3D semantic segmentation with LiDAR and camera fusion, built on a small numpy autograd."""

from .alignment import UNLABELED, loss_seen, loss_unseen, predict, similarity_matrix
from .metrics import ConfusionMatrix, EvalReport, hiou, miou
from .semantic import ClassVocabulary
from .synthscene import Scene, SceneSpec, dataset, generate_scene
from .tensor import Tensor, backward, grad_check
from .trainer import ABLATIONS, TrainConfig, evaluate, forward_scene, init_model, train

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "UNLABELED", "ClassVocabulary", "ConfusionMatrix", "EvalReport", "Scene", "SceneSpec",
    "Tensor", "TrainConfig", "backward", "dataset", "evaluate", "forward_scene", "generate_scene", "grad_check",
    "hiou", "init_model", "loss_seen", "loss_unseen", "miou", "predict", "similarity_matrix", "train",
]
