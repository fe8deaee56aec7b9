#!/usr/bin/env python3
"""
Standardized Error Handling for stochesp
Exception hierarchy for the numerical services plus consistent logging helpers
used by the experiment runners.
"""

import logging
from functools import wraps
from typing import Dict, Any, Optional, Callable, List


class StochEspError(Exception):
    """Base class for every error raised by the library"""


class DomainError(StochEspError, ValueError):
    """A parameter lies outside the domain an operation is defined on"""


class ShapeMismatchError(DomainError):
    """Dimensions or horizons of windows, ensembles or weights disagree"""


class CertificationError(StochEspError):
    """An operation was asked to run without the certificate it requires"""


class UnsupportedFilterError(StochEspError):
    """Contractivity cannot be certified for this input-generating filter"""


class SolverLimitError(StochEspError):
    """Problem size exceeds the configured cap of an exact solver"""


class ConfigError(StochEspError):
    """Experiment configuration could not be parsed or validated"""

    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        self.diagnostics = list(diagnostics or [])
        super().__init__(message)

    def __str__(self):
        if not self.diagnostics:
            return super().__str__()
        lines = [super().__str__()] + [f"  - {d}" for d in self.diagnostics]
        return "\n".join(lines)


class ErrorHandler:
    """Centralized error logging with consistent patterns"""

    def __init__(self, logger_name: str = __name__):
        self.logger = logging.getLogger(logger_name)

    @staticmethod
    def _context_suffix(context: Optional[Dict[str, Any]]) -> str:
        return f" | Context: {context}" if context else ""

    def log_error(self, operation: str, error: Exception, context: Dict[str, Any] = None):
        """Standardized error logging with context"""
        self.logger.error(f"❌ {operation} failed: {error}{self._context_suffix(context)}")

        # Full traceback only when debugging
        if self.logger.isEnabledFor(logging.DEBUG):
            self.logger.debug(f"Full traceback for {operation}:", exc_info=True)

    def log_warning(self, operation: str, message: str, context: Dict[str, Any] = None):
        """Standardized warning logging"""
        self.logger.warning(f"⚠️ {operation}: {message}{self._context_suffix(context)}")

    def log_info(self, operation: str, message: str, context: Dict[str, Any] = None):
        """Standardized info logging for operational tracking"""
        self.logger.info(f"ℹ️ {operation}: {message}{self._context_suffix(context)}")

    def safe_execute(self, operation: str, func: Callable,
                     default_return: Any = None, context: Dict[str, Any] = None,
                     cleanup_func: Optional[Callable] = None) -> Any:
        """Execute function with standardized error handling"""
        try:
            return func()
        except Exception as e:
            self.log_error(operation, e, context)
            if cleanup_func:
                try:
                    cleanup_func()
                except Exception as cleanup_error:
                    self.log_error(f"{operation} cleanup", cleanup_error)
            return default_return


def with_error_handling(operation: str, default_return: Any = None,
                        cleanup_func: Optional[Callable] = None):
    """Decorator: log any exception with call context and return default_return"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            error_handler = ErrorHandler(func.__module__)

            def execute():
                return func(*args, **kwargs)

            context = {
                'function': func.__name__,
                'args_count': len(args),
                'kwargs_keys': list(kwargs.keys())
            }

            return error_handler.safe_execute(
                operation, execute, default_return, context, cleanup_func
            )
        return wrapper
    return decorator
