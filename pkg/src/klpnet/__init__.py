"""Category-implicit keypoint and link prediction on synthetic scenes:
heatmap codec, pyramid topology and cost model, CIoU geometry, a conditional
graph autoencoder for links, occlusion-aware node assignment and metrics."""

__version__ = "0.1.0"
