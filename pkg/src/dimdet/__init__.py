"""Video detector for dim, small moving targets in grayscale imagery.

The package is organised as a library plus a thin command line front end:

- :mod:`dimdet.ops`        modulated deformable convolution primitives
- :mod:`dimdet.attention`  channel / spatial attention building blocks
- :mod:`dimdet.backbone`   shared per-frame feature extractor
- :mod:`dimdet.align`      deformable temporal alignment of adjacent frames
- :mod:`dimdet.refine`     adaptive fusion and attention-guided refinement
- :mod:`dimdet.head`       anchor-free detection head, decoding, matching cost
- :mod:`dimdet.losses`     motion-compensation and total training losses
- :mod:`dimdet.model`      full detector wiring the stages together
- :mod:`dimdet.data`       dataset layout, clip sampling, resizing
- :mod:`dimdet.synth`      synthetic sequence generator
- :mod:`dimdet.metrics`    matching, precision/recall, average precision
- :mod:`dimdet.train`      training loop
- :mod:`dimdet.predict`    sliding-window inference and detection files
- :mod:`dimdet.figures`    matplotlib / PNG rendering helpers
- :mod:`dimdet.cli`        ``dimdet`` command line entry point
"""

__version__ = "0.1.0"
