"""CT kidney classification: transfer-learning backbones, a feature-concatenation
ensemble, LIME explanations and a multi-class metrics engine."""

from .augment import AugmentationConfig, BatchStream, ArrayStream, augment, load_and_resize
from .ensemble import EnsembleModel, EnsembleSpec, build_ensemble, ensemble_forward, train_ensemble
from .lime import LimeConfig, explain, render_overlay, segment
from .manifest import LabelCodec, Manifest, SampleRecord, one_hot, scan_dataset, stratified_split
from .metrics import confusion_matrix, evaluate, macro_average, per_class_metrics, pr_curve, roc_auc
from .models import BackboneSpec, ClassifierModel, attach_head, build_backbone, predict_proba
from .training import TrainingConfig, TrainingHistory, cross_entropy, early_stopping_step, train

__version__ = "0.1.0"
