"""Sharded key-value store on emulated persistent memory with in-store (ADO) plugins."""

__version__ = "1.0.0"
