"""Sidescan-sonar bathymetry by differentiable rendering of an implicit
surface, used as an elevation prior in a submap pose-graph SLAM back-end."""

__version__ = "0.1.0"
