"""GAN-learned sketch representations for retrieval, built on a small numpy autograd."""
from .data import DatasetManifest, SampleStore, generate_dataset, load_image, save_image
from .invariance import InvarianceReport, SweepSpec, rescale, rotate, run_sweep, shift
from .nn import Model, build_model, count_params, load_checkpoint, save_checkpoint
from .retrieval import EmbeddingIndex, Embedding, build_index, encode, make_encoder, similarity, top_k
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, build_pair

__version__ = "0.1.0"
