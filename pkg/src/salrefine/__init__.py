"""Saliency maps from a subitizing classifier: Grad-CAM extraction, iterative
saliency updating, superpixel-graph refinement, and evaluation metrics."""

from .gradcam import GradCAM, cam, class_activation_map, multiscale_cam, neuron_weights
from .imagery import (
    load_graymap,
    load_image,
    load_mask,
    load_tensor,
    normalize_unit,
    resize_bilinear,
    save_graymap,
    save_tensor,
)
from .metrics import EvalReport, batch_eval, mae, max_fbeta, pr_curve, s_measure
from .refine import (
    LaplacianKernelRegressor,
    SuperpixelRefiner,
    build_system,
    refine_map,
    render_refined,
    solve_alpha,
)
from .slic import SlicSegmenter, adjacency_pairs, slic_segment, superpixel_features
from .sum import SaliencyUpdater, SumConfig, fuse_mask, mask_mining_loss, total_loss, update_loop
from .toyscorer import ToyScorer, backprop_class, cross_entropy_loss, forward, train_step

__version__ = "0.1.0"
