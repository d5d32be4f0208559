"""Spatially-sparse convolutional autoencoders for 2, 3 and 4 dimensional inputs."""

from .sparse_tensor import Coordinate, DenseTensor, SparseTensor, build, from_dense, to_dense
from .models import Autoencoder, NetworkSpec, build_autoencoder

__all__ = ["Coordinate", "DenseTensor", "SparseTensor", "build", "from_dense", "to_dense",
           "Autoencoder", "NetworkSpec", "build_autoencoder"]
__version__ = "0.1.0"
