"""Extensions of incompressible Euler flows on the torus to warped products."""

__version__ = "0.1.0"
