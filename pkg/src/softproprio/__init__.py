"""Camera-based shape proprioception for a soft pneumatic bending actuator.

Simulation, marker rendering, scene calibration, image-to-point-cloud
learning and rigid registration, with a command-line pipeline on top.
"""

__version__ = "0.1.0"
