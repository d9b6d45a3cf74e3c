"""State-of-charge estimation workbench.

Thevenin-model identification, a data-driven virtual sensor built from an
observer bank, an extended Kalman filter that can fuse the sensor's output,
and black-box calibration of the filter's noise levels.  A synthetic cell
simulator supplies ground truth.
"""

__version__ = "0.1.0"
