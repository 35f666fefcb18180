"""GPS-denied inertial navigation toolkit.

Learns to map raw IMU/barometer/magnetometer measurements to 5 Hz position
and velocity increments with a recurrent network, reconstructs flight paths
by accumulating increments, and quantifies drift against a strapdown
dead-reckoning baseline. Includes a synthetic-flight oracle, a from-scratch
LSTM/BPTT/Adam core, and a real-time streaming inference harness.
"""

__version__ = "0.1.0"
