"""Few-shot segmentation with prototype refinement, on a small numpy autodiff engine."""

__version__ = "0.1.0"
