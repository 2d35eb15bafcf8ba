"""Click-through rate prediction with features from bipartite user-URL graphs.

Modules: ``ingest`` (logs, synthetic data), ``graph``, the reducers ``svd``,
``nmf`` and ``irm``, ``features``, ``logreg``, ``eval``, ``bidserver`` and
``cli``.
"""

__version__ = "0.1.0"
