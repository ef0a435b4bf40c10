"""Attribution maps from learnable backward-propagation rules.

Subpackages cover the autodiff engine, small CNN models, gradient-based
attribution baselines, the learned-rule optimizer, the MoRF/LeRF/ROAR
evaluation harness, dataset IO, and the command-line interface.
"""

__version__ = "0.1.0"
