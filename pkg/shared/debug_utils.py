"""
Debug utilities for the kinetics toolkit.

Tracing decorators log calls, arguments and return values of the
orchestration entry points (solvers, estimators, commands) when debug
mode is on. Inner simulation loops are never decorated.
"""
import functools
import json
import logging
import os
from datetime import datetime
from typing import Any, Callable


# global debug flag
DEBUG = os.getenv('DEBUG', 'False').lower() == 'true'
DEBUG_LOG_FILE = os.getenv('DEBUG_LOG_FILE', 'debug.log')
MAX_RESULT_CHARS = 500

logger = logging.getLogger('kinetics')
if not logger.handlers:
    _console = logging.StreamHandler()
    _console.setFormatter(logging.Formatter('%(message)s'))
    logger.addHandler(_console)
logger.setLevel(logging.DEBUG if DEBUG else logging.INFO)


def write_debug_log(message: str):
    """Write a debug message to the log file."""
    if not DEBUG:
        return

    try:
        with open(DEBUG_LOG_FILE, 'a', encoding='utf-8') as f:
            f.write(message + '\n')
    except OSError as e:
        logger.warning(f"Error writing to debug log: {e}")


def clear_debug_log():
    """Clear the debug log file."""
    try:
        if os.path.exists(DEBUG_LOG_FILE):
            os.remove(DEBUG_LOG_FILE)
        logger.debug(f"Debug log cleared: {DEBUG_LOG_FILE}")
    except OSError as e:
        logger.warning(f"Error clearing debug log: {e}")


def _emit(message: str):
    logger.debug(message)
    write_debug_log(message)


def _format_result(result: Any) -> str:
    try:
        if hasattr(result, 'to_dict'):
            result_str = json.dumps(result.to_dict(), indent=2, default=repr)
        elif isinstance(result, (dict, list)):
            result_str = json.dumps(result, indent=2, default=repr)
        else:
            result_str = repr(result)
    except (TypeError, ValueError):
        # fallback to repr if json serialization fails
        result_str = repr(result)

    # truncate very long results (arrays, trajectories)
    if len(result_str) > MAX_RESULT_CHARS:
        result_str = result_str[:MAX_RESULT_CHARS] + "... (truncated)"
    return result_str


def _format_args(args, kwargs) -> str:
    args_str = ", ".join(_short_repr(arg) for arg in args)
    kwargs_str = ", ".join(f"{k}={_short_repr(v)}" for k, v in kwargs.items())
    return ", ".join(filter(None, [args_str, kwargs_str]))


def _short_repr(value: Any) -> str:
    text = repr(value)
    if len(text) > 120:
        text = text[:120] + "..."
    return text


def _traced(full_name: str, func: Callable, args, kwargs):
    timestamp = datetime.now().strftime("%H:%M:%S.%f")[:-3]
    _emit(f"[{timestamp}] CALL: {full_name}({_format_args(args, kwargs)})")

    try:
        result = func(*args, **kwargs)
    except Exception as e:
        _emit(f"[{timestamp}] ERROR: {full_name}() -> Exception: {type(e).__name__}: {str(e)}")
        raise

    if result is None:
        _emit(f"[{timestamp}] RETURN: {full_name}() -> None")
    else:
        _emit(f"[{timestamp}] RETURN: {full_name}() -> {_format_result(result)}")
    return result


def debug_function(func: Callable) -> Callable:
    """
    Decorator that logs function calls, arguments, and return values when DEBUG=True.

    Usage:
        @debug_function
        def solve_backward(net, lattice, times, tol):
            ...
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        if not DEBUG:
            return func(*args, **kwargs)
        return _traced(f"{func.__module__}.{func.__qualname__}", func, args, kwargs)

    return wrapper


def debug_method(func: Callable) -> Callable:
    """
    Decorator for methods; the log line carries the runtime class name.

    Usage:
        class RhsDualEstimator(ErrorEstimator):
            @debug_method
            def estimate(self, net, grid, stop):
                ...
    """
    @functools.wraps(func)
    def wrapper(self, *args, **kwargs):
        if not DEBUG:
            return func(self, *args, **kwargs)
        full_name = f"{self.__class__.__name__}.{func.__name__}"
        return _traced(full_name, lambda *a, **k: func(self, *a, **k), args, kwargs)

    return wrapper


def set_debug(enabled: bool):
    """Enable or disable debug output globally."""
    global DEBUG
    DEBUG = enabled
    logger.setLevel(logging.DEBUG if enabled else logging.INFO)
    if enabled:
        clear_debug_log()  # clear the log when enabling debug
    logger.debug(f"Debug mode {'enabled' if enabled else 'disabled'}")


def is_debug_enabled() -> bool:
    """Check if debug mode is currently enabled."""
    return DEBUG


def get_debug_log_path() -> str:
    """Get the path to the debug log file."""
    return DEBUG_LOG_FILE
