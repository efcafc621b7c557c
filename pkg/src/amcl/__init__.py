"""Adversarial masking contrastive learning for vein recognition."""
from .adversarial import AMCLPretrainer, LatentSet, amcl_objective, encoder_step, latent_step, run_amcl
from .contrastive import (AugmentationPolicy, ContrastiveConfig, ViewBatch, augment_views, contrastive_loss,
                          cosine_similarity, masked_simclr_loss, simclr_loss)
from .datasets import (DatasetSplit, Image, SyntheticVeinConfig, generate_synthetic_dataset, load_image_directory,
                       save_image_directory)
from .encoders import Encoder, build_encoder, register_encoder
from .evalkit import (Classifier, FinetuneConfig, VeinClassifier, VerificationReport, compare_pretraining,
                      equal_error_rate, evaluate, finetune, roc_curve)
from .exceptions import (AMCLError, CheckpointError, ContractViolation, DatasetError, ModeCollapseError,
                         NonFiniteGradientError)
from .experiment import ConfigError, ExperimentConfig, load_config
from .gan import (GanTrainConfig, MaskDiscriminator, MaskGAN, MaskGenerator, load_generator, sample_latents,
                  sample_masks, train_gan)
from .masking import Mask, MaskCorpus, MaskSamplerConfig, apply_mask, build_mask_corpus, sample_mask
from .pipeline import run_pipeline
from .plots import emit_plots

__version__ = "0.1.0"
