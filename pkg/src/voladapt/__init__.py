"""Desk-scale volumetric segmentation with a shape-prior loss and
adversarial domain adaptation, on a from-scratch autodiff engine."""

from .autodiff import ModelParams, Optimizer, Tensor, grad_check
from .losses import (LossWeights, adversarial_loss, combined_loss, dice_loss,
                     latent_distance, shape_loss)
from .metrics import (BinaryMask, MetricsReport, dice, largest_component,
                      paired_ttest, select_threshold, surface_distances)
from .nets import (AutoencoderConfig, ClassifierConfig, VNetConfig,
                   build_autoencoder, build_classifier, build_segnet,
                   classify_domain, decode, encode, segment)
from .phantom import DomainSpec, Volume, builtin_domains, make_dataset, preprocess, sample_case
from .training import (Models, TrainStage, default_stages, freeze,
                       lambda_schedule, preset, run_pipeline, run_stage, unfreeze)

__version__ = "0.1.0"
