"""Spatially aware self-supervised pretraining on synthetic tactile images.

Modules: :mod:`~sarl.synthdata` (scene rendering and datasets),
:mod:`~sarl.augment` (views and the warp between them), :mod:`~sarl.encoder`
(a small convolutional encoder with hand-written gradients),
:mod:`~sarl.losses` (global and spatial objectives), :mod:`~sarl.trainer`
(pretraining loop) and :mod:`~sarl.evaluate` (probing, ablations, gradient
checks).
"""

__version__ = "0.1.0"
