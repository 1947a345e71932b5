"""Bio-regularized cascade segmentation of the choroid in OCT B-scans."""

__version__ = "0.1.0"
