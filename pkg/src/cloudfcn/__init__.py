"""Cloud detection on Landsat 8 scenes with a fully convolutional network.

Modules: ``raster_io`` (bands, QA decoding, masks), ``gt_correction``
(gradient-based snow/ice removal from QA ground truth), ``layers`` and
``unet`` (the network, written directly in numpy), ``training`` (loss,
Adam, augmentation), ``patches`` (tiling and whole-scene prediction),
``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
