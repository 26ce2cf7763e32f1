"""
Micropolar thin porous media homogenization toolkit.
"""

__version__ = "1.0.0"
__author__ = "Micropolar Homogenization Team"
