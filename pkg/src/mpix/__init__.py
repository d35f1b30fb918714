"""Layered message-passing extensions over an instrumented in-process transport."""

from .comm import Communicator, NeighborTopology, comm_init, dist_graph_create_adjacent
from .collectives import allgather, alltoallv, list_algorithms, set_default_algorithm
from .errors import (
    AbortedError,
    AddressingError,
    ArgumentError,
    ConfigurationError,
    DeadlockError,
    LifecycleError,
    MatchError,
    MPIXError,
    RegistryError,
    TopologyError,
    UsageError,
)
from .launch import run_ranks
from .transport import ANY_SOURCE, ANY_TAG, Envelope, Universe, create_universe

__version__ = "0.1.0"
