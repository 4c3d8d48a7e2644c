"""Tagged-particle dynamics in random long-range force fields of Poisson scatterers."""

__version__ = "0.1.0"
