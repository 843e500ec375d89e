"""Distributed indoor 3D monitoring with simulated depth cameras.

Sensor servers render synthetic depth/color/label frames and user skeletons,
encode them, and stream them over TCP to a fusion client that reconstructs a
merged point cloud and maintains labeled output skeletons across cameras.
"""

__version__ = "0.1.0"
