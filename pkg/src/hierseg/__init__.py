"""Hierarchy-aware volumetric segmentation: class trees, fractal softmax, losses, metrics and inference."""

from .fractal import check_constraints, decode, fractal_softmax, lift_logits
from .grid import BoundingBox, LabelVolume, LogitField, ScalarField, load_vgrid, save_vgrid
from .loss import LossWeights, TrainingSchedule, curriculum_weights, finite_diff_check, loss_gradient, total_loss
from .metrics import evaluate_case, nsd
from .tree import HierarchyError, SemanticTree, aorta_hierarchy, load_hierarchy, parse_hierarchy, project_labels

__version__ = "0.1.0"
