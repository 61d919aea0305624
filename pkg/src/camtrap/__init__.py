"""Camera-trap image pipeline: detection, species identification,
individual recognition, segmentation and the evaluation protocols,
runnable end to end on a built-in synthetic corpus."""

__version__ = "0.1.0"
