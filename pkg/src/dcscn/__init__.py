"""Incrementally constructed convolutional classifier with difference-of-
Gaussians kernels, a closed-form readout, feature-independence class
activation maps, and RL-driven kernel pruning."""

from .config import RunConfig, load_config
from .data import (Dataset, LabeledSample, augment_dataset, generate_synthetic,
                   load_image_folder, preprocess, preprocess_dataset,
                   write_dataset)
from .errors import (BuildError, ConfigError, DataError, DcscnError,
                     DimensionError, NumericError)
from .interpret import (CamMap, IndependenceScores, cam,
                        independence_coefficients, iou, iou_dataset,
                        iou_per_sample, export_heatmap)
from .network import (BuildConfig, BuildTrace, DoGKernel, LayerSpec,
                      NetworkModel, accuracy, build, feature_matrix,
                      load_model, param_count, predict, predict_batch,
                      sample_kernel, save_model, solve_readout)
from .numerics import RngStream
from .prune import (DdpgConfig, Mlp, ReplayBuffer, Transition, apply_pruning,
                    rank_kernels, reward, reward_components, train_pruner)

__version__ = "0.1.0"
