"""Parameter-efficient shadow detection with automatic point prompts."""

from .adapters import (Adapter, AdapterConfig, AdaptedImageEncoder,
                       AdaptedTransformerLayer, EncoderSpec, toy_encoder_spec,
                       vit_b_spec)
from .config import RunConfig, parse_config, validate_config
from .data import (DatasetProfile, DatasetSample, augment, load_dataset,
                   make_profile, resize_normalize, synthetic_samples)
from .freeze import (FreezePolicy, apply_freeze_policy, parameter_census,
                     standard_freeze_policy, resolve_policy)
from .losses import FocalParams, focal_loss
from .metrics import BERReport, aggregate_ber, ber_compute, binarize
from .prompt_net import (BackboneDescriptor, CoarseMaskPredictor,
                         DecoderConfig, PyramidDecoder, build_backbone)
from .sampling import (PointPrompt, PromptSet, SamplingConfig,
                       assemble_prompts, bbox_from_mask, grid_sample,
                       topk_sample)
from .segmenter import (MaskDecoder, ModelConfig, PromptEncoder,
                        ShadowSegmenter, build_model, full_model_config,
                        toy_model_config)
from .trainer import (evaluate, infer, load_checkpoint, run_ablation,
                      save_checkpoint, train)

__version__ = "0.1.0"
