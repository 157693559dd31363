"""Direct visual odometry with virtual-stereo scale anchoring."""

__version__ = "0.1.0"
