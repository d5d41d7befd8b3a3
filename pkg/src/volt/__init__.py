"""Multi-view voxel reconstruction with a volume transformer (VolT / EVolT)."""

from .attention import AttentionTrace, HeadParams, attn, diview, mh_deatt, mh_view_vol_attn, mh_vol_attn
from .data import Dataset, FrozenEmbedder, ShapeSpec, build_dataset, embed_views, generate_shape, render_silhouette
from .metrics import divergence_report, f_score, iou, kde_density, precision_recall, view_divergence, voxel_surface_points
from .model import ModelConfig, VoltModel, bce_loss
from .tensor import AdamWState, ParamStore, Tensor, adamw_step, grad_check, layer_norm, softmax_rows
from .training import TrainConfig, train

__version__ = "0.1.0"
