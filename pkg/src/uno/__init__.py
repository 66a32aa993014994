"""User-log-driven optimization engine.

Distills raw interaction logs into rules and preference pairs, clusters
sessions on joint query/rule features, scores each cluster's cognitive
gap, trains expert or critic adapters behind a pluggable trainer protocol,
and routes new queries through the resulting experience modules.
"""

__version__ = "0.1.0"
