"""Siamese spiking neural networks with time-to-first-spike coding, trained
on the Earth Mover's Distance between output spike trains."""

import numba as _numba

# the bundled TBB is too old for numba; OpenMP keeps parallel kernels quiet
_numba.config.THREADING_LAYER = "omp"

from .spiketrain import ChannelEvents, SpikeTrain, from_z, merge_sorted, to_z
from .emd import EmdResult, EmptyEmbeddingError, emd, emd_matrix
from .snn import (
    CausalSolution,
    Network,
    NetworkTopology,
    NeuronConfig,
    forward_batch,
    backward_batch,
    network_backward,
    network_forward,
    neuron_backward,
    neuron_forward,
)

__version__ = "0.1.0"
