# Velocity lattice gas toolkit - Backend
__version__ = "0.1.0"
