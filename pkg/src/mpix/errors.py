"""Exception hierarchy shared by every layer."""


class MPIXError(Exception):
    """Base class for all library errors."""


class ConfigurationError(MPIXError):
    """Bad universe, node map or harness configuration."""


class AddressingError(MPIXError):
    """A message names a rank outside the universe."""


class ArgumentError(MPIXError):
    """Buffer, count or displacement arguments are inconsistent."""


class TopologyError(MPIXError):
    """Invalid neighbor graph, or index lists that disagree across ranks."""


class RegistryError(MPIXError):
    """Unknown collective kind or algorithm variant."""


class LifecycleError(MPIXError):
    """A persistent request or channel was driven through an illegal transition."""


class UsageError(MPIXError):
    """Bad partition index or repeated pready."""


class MatchError(MPIXError):
    """Sender and receiver of a partitioned channel disagree on geometry."""


class DeadlockError(MPIXError):
    """The watchdog expired while blocked waiting for traffic."""


class AbortedError(MPIXError):
    """The universe was aborted by another rank context."""
