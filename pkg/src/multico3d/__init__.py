"""One-shot class-incremental multi-label segmentation on synthetic tract volumes.

Modules:
    diffkernel  reverse-mode autodiff over numpy arrays, gradient checking
    synthgen    synthetic overlapping-tract volumes, augmentation, persistence
    sampler     distance-transform regions, voxel sampling, batch subsets
    losses      distillation, segmentation, voxel contrast, loss weighting
    model       encoder/decoder network, LwF initialisation, checkpoints
    trainer     base and novel training steps, Adamax
    evalkit     Dice, forgetting, the ablation harness
    cli         the ``multico3d`` command
"""

__version__ = "0.1.0"
