"""
Tau-leap error estimation toolkit for stochastic reaction networks.

Path methods register themselves here, in the same way the estimators in
kinetics.estimate do.
"""

import logging
from typing import Any, Dict, List, Type

from .base_method import PathMethod
from .errors import ConfigurationError

logger = logging.getLogger('kinetics')

# Registry of all available path methods
METHOD_REGISTRY: Dict[str, Type[PathMethod]] = {}


def register_method(method_class: Type[PathMethod]) -> None:
    """Register a path method class with the system."""
    method_instance = method_class()
    METHOD_REGISTRY[method_instance.name] = method_class
    logger.debug(f"[REGISTRY] Registered path method: {method_instance.name}")


def get_available_methods() -> List[Dict[str, Any]]:
    """Get list of all available path methods with their metadata."""
    load_all_methods()
    return [method_class().get_method_info() for method_class in METHOD_REGISTRY.values()]


def get_method(method_name: str) -> PathMethod:
    """Get an instance of a registered path method."""
    load_all_methods()
    if method_name not in METHOD_REGISTRY:
        raise ConfigurationError(f"Path method '{method_name}' not found in registry "
                                 f"(available: {sorted(METHOD_REGISTRY)})")
    return METHOD_REGISTRY[method_name]()


def load_all_methods():
    """Load all path methods by importing their modules."""
    if METHOD_REGISTRY:
        return
    # importing the module triggers registration
    from . import simulate  # noqa: F401
    logger.debug(f"[REGISTRY] Loaded {len(METHOD_REGISTRY)} path methods: {list(METHOD_REGISTRY.keys())}")
