"""Geospatially stratified airborne LiDAR dataset construction."""

__version__ = "0.1.0"
