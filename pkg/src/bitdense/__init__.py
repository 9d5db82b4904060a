"""Bit-packed binary neural network engine with a multi-task dense
prediction framework, trained end to end on synthetic scenes."""

__version__ = "0.1.0"
