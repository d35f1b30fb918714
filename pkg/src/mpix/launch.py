"""Run one function per rank, each in its own thread, over a shared universe."""

from __future__ import annotations

import threading
from typing import Any, Callable

from .errors import AbortedError, DeadlockError
from .transport import Endpoint, Universe


def _primary_error(errors: dict[int, BaseException]) -> BaseException:
    # ranks that were only woken by abort are secondary
    real = {r: e for r, e in errors.items() if not isinstance(e, AbortedError)}
    pool = real or errors
    return pool[min(pool)]


def run_ranks(universe: Universe, fn: Callable[..., Any], *args,
              join_timeout: float | None = None, **kwargs) -> list[Any]:
    """Call ``fn(endpoint, *args, **kwargs)`` for every rank concurrently.

    Returns the per-rank results in rank order.  The first failing rank aborts
    the universe so its peers stop waiting; the root-cause exception is
    re-raised in the caller with the per-rank map attached as ``rank_errors``.
    """
    n = universe.n_ranks
    results: list[Any] = [None] * n
    errors: dict[int, BaseException] = {}

    def body(ep: Endpoint) -> None:
        try:
            results[ep.rank] = fn(ep, *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - propagated to the caller
            errors[ep.rank] = exc
            universe.abort(exc)

    if n == 1:
        body(universe.endpoints[0])
    else:
        threads = [
            threading.Thread(target=body, args=(ep,), name=f"rank-{ep.rank}", daemon=True)
            for ep in universe.endpoints
        ]
        for t in threads:
            t.start()
        if join_timeout is None and universe.timeout is not None:
            join_timeout = universe.timeout * 2 + 1.0
        for t in threads:
            t.join(join_timeout)
        stalled = [r for r, t in enumerate(threads) if t.is_alive()]
        if stalled:
            exc = DeadlockError(f"ranks {stalled} still running after {join_timeout}s")
            universe.abort(exc)
            for r in stalled:
                errors.setdefault(r, exc)
    if errors:
        exc = _primary_error(errors)
        exc.rank_errors = dict(errors)
        raise exc
    return results
