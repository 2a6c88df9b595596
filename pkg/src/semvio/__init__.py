"""Sliding-window visual-inertial odometry with object mapping.

Modules:
    lie          rotation/pose primitives and projective operators
    propagation  closed-form IMU mean/covariance prediction
    residuals    measurement error functions and analytic Jacobians
    backend      triangulation, object initialization, LM refinement
    msckf        null-space update pipeline and the filter driver
    simulate     synthetic trajectories, scenes, and measurements
    metrics      trajectory/object evaluation
    cli          simulate / run / eval commands
"""

__version__ = "0.1.0"
