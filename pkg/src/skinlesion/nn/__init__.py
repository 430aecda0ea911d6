"""Minimal deterministic tensor engine: layers, graphs, loss, Adam, gradient checks."""
from .functional import add, avgpool2d, batchnorm, concat, conv2d, dense, depthwise_conv2d, dropout, flatten, global_avgpool, maxpool2d, relu
from .graph import ForwardPass, GraphError, ModelGraph, StateError, graph_backward, graph_forward, predict_proba, softmax_cross_entropy
from .layers import ShapeError, softmax
from .optim import AdamState, adam_step
