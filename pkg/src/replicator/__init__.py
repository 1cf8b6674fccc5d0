"""Cascading multi-site replication of DRS-structured dataset trees."""

__version__ = "0.1.0"
