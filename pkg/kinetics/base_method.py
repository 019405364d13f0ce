"""
Base class that all path-simulation methods inherit from.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict


class PathMethod(ABC):
    """Base class for the registered path generators."""

    @property
    @abstractmethod
    def name(self) -> str:
        """Unique identifier used on the command line (e.g., 'bridge')."""
        pass

    @property
    @abstractmethod
    def display_name(self) -> str:
        """Human-readable name for reports."""
        pass

    @property
    @abstractmethod
    def description(self) -> str:
        """Short description of the method."""
        pass

    @property
    def needs_grid(self) -> bool:
        """Whether simulate() requires a base time grid."""
        return False

    @abstractmethod
    def simulate(self, net, rng, grid=None, control=None):
        """Simulate one path from the network's initial state to its final time."""
        pass

    def get_method_info(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'display_name': self.display_name,
            'description': self.description,
            'needs_grid': self.needs_grid,
        }
