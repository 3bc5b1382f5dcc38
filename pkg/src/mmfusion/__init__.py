"""Multimodal (text + image) post classification with late, early, joint and common-space fusion."""

from .data import Dataset, DatasetSplit, Post, gen_synthetic, load_dataset, load_posts, make_splits
from .encoders import Vocabulary, build_vocabulary, encode_text, load_embeddings, project_image
from .losses import aux_loss, backward, combined_loss, grad_check, loss_and_grad, nll_loss
from .model import FusionConfig, Sample, forward, fuse, init_params, late_fuse, predict
from .numkit import SeededRng, affine, sample_distinct, squared_distance, stable_softmax
from .train import MetricsReport, evaluate, sample_negatives, train

__version__ = "0.1.0"
