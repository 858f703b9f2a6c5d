"""
Retry mechanisms with exponential backoff for handling transient failures.
"""

import asyncio
import logging
import random
from dataclasses import dataclass
from typing import Any, Awaitable, Callable, Optional, Tuple, Type, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class RetryConfig:
    """Configuration for retry behavior."""

    max_attempts: int = 3
    base_delay: float = 1.0
    max_delay: float = 60.0
    exponential_base: float = 2.0
    jitter: bool = True

    def delay_for(self, attempt: int, rng: Optional[random.Random] = None) -> float:
        """Backoff delay after the given zero-based failed attempt."""
        delay = min(self.base_delay * (self.exponential_base**attempt), self.max_delay)
        if self.jitter:
            delay = delay * (0.5 + (rng or random).random() * 0.5)
        return delay


class RetriesExhausted(Exception):
    """Raised by retry_async when every attempt failed with a retryable error."""

    def __init__(self, attempts: int, last_exception: BaseException):
        super().__init__(f"{attempts} attempts failed; last error: {last_exception}")
        self.attempts = attempts
        self.last_exception = last_exception


async def retry_async(
    func: Callable[[], Awaitable[T]],
    config: RetryConfig,
    retryable_exceptions: Tuple[Type[BaseException], ...] = (Exception,),
    non_retryable_exceptions: Tuple[Type[BaseException], ...] = (),
    operation_name: Optional[str] = None,
) -> T:
    """
    Retry an async callable with exponential backoff.

    Args:
        func: Zero-argument coroutine factory to retry
        config: Retry configuration
        retryable_exceptions: Exceptions that should trigger retries
        non_retryable_exceptions: Exceptions that are re-raised immediately
        operation_name: Name used in log messages

    Returns:
        The result of the first successful call

    Raises:
        RetriesExhausted: When all attempts failed with retryable errors
    """
    name = operation_name or getattr(func, "__name__", "operation")
    last_exception: Optional[BaseException] = None

    for attempt in range(config.max_attempts):
        try:
            result = await func()

            if attempt > 0:
                logger.info(f"{name} succeeded on attempt {attempt + 1}")

            return result

        except non_retryable_exceptions as e:
            logger.error(f"Non-retryable error in {name}: {e}")
            raise

        except retryable_exceptions as e:
            last_exception = e

            # Don't sleep after the last attempt
            if attempt == config.max_attempts - 1:
                break

            delay = config.delay_for(attempt)
            logger.warning(
                f"Attempt {attempt + 1} failed for {name}: {e}. "
                f"Retrying in {delay:.2f}s...",
                extra={"attempt": attempt + 1, "retry_delay": delay},
            )
            await asyncio.sleep(delay)

    logger.error(f"All {config.max_attempts} attempts failed for {name}")
    assert last_exception is not None
    raise RetriesExhausted(config.max_attempts, last_exception)


async def gather_bounded(
    operations: list[Callable[[], Awaitable[Any]]],
    max_concurrent: int = 4,
) -> list[dict[str, Any]]:
    """
    Run coroutine factories with a bounded number in flight.

    Returns one ``{"index", "success", "result" | "error"}`` entry per
    operation, in input order. Failures do not stop the batch.
    """
    semaphore = asyncio.Semaphore(max_concurrent)

    async def run(operation: Callable[[], Awaitable[Any]], index: int) -> dict[str, Any]:
        async with semaphore:
            try:
                return {"index": index, "result": await operation(), "success": True}
            except Exception as e:
                return {"index": index, "error": e, "success": False}

    return list(await asyncio.gather(*(run(op, i) for i, op in enumerate(operations))))
