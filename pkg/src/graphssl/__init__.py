"""Graph-regularized semi-supervised learning with graph-partitioned mini-batches.

Pipeline: ``dataio`` (data and formats) -> ``knngraph`` (affinity graph) ->
``partitioner`` (balanced blocks) -> ``batching`` (meta-batch plans) ->
``model`` (network, loss, gradients) -> ``engine`` (training loops).
"""

from .errors import ConfigError, FormatError, GraphSSLError, IntegrityError, TrainingError

__version__ = "0.1.0"

__all__ = ["ConfigError", "FormatError", "GraphSSLError", "IntegrityError", "TrainingError", "__version__"]
