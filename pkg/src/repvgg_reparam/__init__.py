"""RepVGG structural re-parameterization toolkit."""

__version__ = "1.0.0"
__author__ = "Naveen Malik"
__email__ = "jewzaam@gmail.com"
