"""
Command-line plugin for the kinetic layer solver
"""

from .cli import main

__all__ = ["main"]
