"""Pose-graph maps anchored by fiducial tags, built from VIO sessions."""

__version__ = "0.1.0"
