"""BunchBFT protocol family, a MirBFT-style baseline and a deterministic simulator."""

from .core import ClusterConfig, RoundPos, Topology, make_topology
from .crypto import KeyRing
from .cross import CrossCluster
from .mir import MirReplica
from .pipeline import PipelinedReplica
from .replica import Replica

__version__ = "0.1.0"

__all__ = ["ClusterConfig", "CrossCluster", "KeyRing", "MirReplica", "PipelinedReplica", "Replica", "RoundPos",
           "Topology", "make_topology"]
