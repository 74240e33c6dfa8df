"""Two-stage valence-arousal estimation: a frame CNN, a recurrent stage over
feature windows, and histogram-based label balancing. Pure NumPy."""

__version__ = "0.1.0"
