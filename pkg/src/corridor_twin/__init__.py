"""Desk-scale simulator of a sensor-equipped road corridor and its digital twin.

Ground-truth traffic is sensed by roadside stations, shipped over simulated
links to a central fusion server, redistributed to connected agents and
stored for scenario extraction and model calibration.
"""

__version__ = "0.1.0"
