"""Trifocal-tensor visual-inertial odometry with IMU-derived feature confidence."""

__version__ = "0.1.0"
